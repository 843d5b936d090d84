#include "feedbacksts/sparse_semantic.hpp"

#include <cmath>

#include "feedbacksts/error.hpp"

namespace fsts {

namespace F = torch::nn::functional;

namespace {

torch::nn::Conv2d conv3x3(int64_t in, int64_t out, int64_t stride = 1) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

torch::Tensor lrelu(const torch::Tensor& x) { return torch::leaky_relu(x, 0.1); }

void zero_conv(torch::nn::Conv2d conv) {
  torch::NoGradGuard guard;
  conv->weight.zero_();
  if (conv->bias.defined()) conv->bias.zero_();
}

torch::Tensor resize_to(const torch::Tensor& x, int64_t h, int64_t w) {
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<int64_t>{h, w})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

int64_t half_up(int64_t v) { return (v + 1) / 2; }

}  // namespace

int64_t GroupPartition::aligned_frames() const {
  int64_t n = 0;
  for (const auto& g : groups) n += static_cast<int64_t>(g.size()) - 1;
  return n;
}

GroupPartition sparse_group(int64_t length, int64_t interval) {
  if (length < 1) throw ValidationError("sparse grouping: frame count must be >= 1");
  if (interval < 1) throw ValidationError("sparse grouping: interval T must be >= 1");
  GroupPartition p;
  p.length = length;
  p.interval = interval;
  for (int64_t x = 0; x < std::min(interval, length); ++x) {
    std::vector<int64_t> g;
    for (int64_t d = x; d < length; d += interval) g.push_back(d);
    p.order.insert(p.order.end(), g.begin(), g.end());
    p.groups.push_back(std::move(g));
  }
  p.inverse_perm.assign(length, 0);
  for (int64_t i = 0; i < length; ++i) p.inverse_perm[p.order[i]] = i;
  return p;
}

torch::Tensor depth_reverse(const torch::Tensor& x) {
  if (x.dim() == 5) return x.flip({2});
  if (x.dim() == 4) return x.flip({1});
  throw ValidationError("depth_reverse expects a [N,C,D,H,W] or [C,D,H,W] tensor");
}

torch::Tensor deform_conv2d(const torch::Tensor& input, const torch::Tensor& offset, const torch::Tensor& mask,
                            const torch::Tensor& weight, const torch::Tensor& bias) {
  const int64_t b = input.size(0), c = input.size(1), h = input.size(2), w = input.size(3);
  const int64_t o = weight.size(0), kh = weight.size(2), kw = weight.size(3);
  const int64_t k = kh * kw;
  if (offset.size(1) != 2 * k || mask.size(1) != k)
    throw ValidationError("deform_conv2d: offset/mask channels do not match the kernel");
  if (offset.size(2) != h || offset.size(3) != w || mask.size(2) != h || mask.size(3) != w)
    throw ValidationError("deform_conv2d: offset/mask must match the input resolution");

  auto opts = input.options();
  torch::Tensor tap_y = torch::arange(kh, opts).sub((kh - 1) / 2).repeat_interleave(kw);
  torch::Tensor tap_x = torch::arange(kw, opts).sub((kw - 1) / 2).repeat({kh});
  torch::Tensor ys = torch::arange(h, opts).view({1, 1, h, 1});
  torch::Tensor xs = torch::arange(w, opts).view({1, 1, 1, w});

  torch::Tensor off = offset.view({b, k, 2, h, w});
  torch::Tensor py = ys + tap_y.view({1, k, 1, 1}) + off.select(2, 0);
  torch::Tensor px = xs + tap_x.view({1, k, 1, 1}) + off.select(2, 1);
  torch::Tensor gy = (2.0 * py + 1.0) / static_cast<double>(h) - 1.0;
  torch::Tensor gx = (2.0 * px + 1.0) / static_cast<double>(w) - 1.0;
  torch::Tensor grid = torch::stack({gx, gy}, -1).view({b, k * h, w, 2});

  torch::Tensor cols = F::grid_sample(input, grid,
                                      F::GridSampleFuncOptions()
                                          .mode(torch::kBilinear)
                                          .padding_mode(torch::kZeros)
                                          .align_corners(false));
  cols = (cols.view({b, c, k, h, w}) * mask.unsqueeze(1)).view({b, c * k, h * w});
  torch::Tensor out = torch::matmul(weight.reshape({o, c * k}), cols);
  if (bias.defined()) out = out + bias.view({1, o, 1});
  MacTally::add(conv_flops(b * o * h * w, c, k));
  return out.view({b, o, h, w});
}

DeformConv2dImpl::DeformConv2dImpl(int64_t in_channels, int64_t out_channels, int64_t kernel_size)
    : in_channels_(in_channels), kernel_size_(kernel_size) {
  if (kernel_size % 2 == 0) throw ValidationError("deformable conv kernel must be odd");
  weight = register_parameter("weight", torch::empty({out_channels, in_channels, kernel_size, kernel_size}));
  bias = register_parameter("bias", torch::empty({out_channels}));
  torch::nn::init::kaiming_uniform_(weight, std::sqrt(5.0));
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_channels * kernel_size * kernel_size));
  torch::nn::init::uniform_(bias, -bound, bound);
}

torch::Tensor DeformConv2dImpl::forward(const torch::Tensor& x, const torch::Tensor& offset,
                                        const torch::Tensor& mask) {
  return deform_conv2d(x, offset, mask, weight, bias);
}

void DeformConv2dImpl::add_cost(CostLedger& ledger, const std::string& layer, const PlaneShape& out,
                                int64_t repeats) const {
  ledger.add(layer, repeats * conv_flops(weight.size(0) * out.height * out.width, in_channels_, taps()));
}

FeatureExtractorImpl::FeatureExtractorImpl(int64_t channels, int levels) : channels_(channels), levels_(levels) {
  if (levels < 1) throw ValidationError("feature extractor needs at least one pyramid level");
  level0_ = register_module("level0", conv3x3(channels, channels));
  zero_conv(level0_);
  for (int l = 1; l < levels; ++l) {
    std::vector<torch::nn::Conv2d> convs;
    const std::string base = "level" + std::to_string(l) + "_";
    convs.push_back(register_module(base + "down", conv3x3(channels, channels, 2)));
    convs.push_back(register_module(base + "conv1", conv3x3(channels, channels)));
    convs.push_back(register_module(base + "conv2", conv3x3(channels, channels)));
    deeper_.push_back(std::move(convs));
  }
}

Pyramid FeatureExtractorImpl::forward(const torch::Tensor& x) {
  // the coarsest level must still be at least 2x2
  const int64_t min_side = int64_t{1} << levels_;
  if (x.dim() != 4 || x.size(1) != channels_)
    throw ValidationError("feature extractor expects [B," + std::to_string(channels_) + ",H,W]");
  if (x.size(2) < min_side || x.size(3) < min_side)
    throw ValidationError("feature map " + std::to_string(x.size(2)) + "x" + std::to_string(x.size(3)) +
                          " too small for " + std::to_string(levels_) + " pyramid levels");
  Pyramid out;
  out.push_back(x + run_conv(level0_, x));
  for (auto& convs : deeper_) {
    torch::Tensor cur = out.back();
    for (auto& c : convs) cur = lrelu(run_conv(c, cur));
    out.push_back(cur);
  }
  return out;
}

void FeatureExtractorImpl::add_cost(CostLedger& ledger, const std::string& layer, const PlaneShape& in,
                                    int64_t repeats) const {
  int64_t h = in.height, w = in.width;
  add_conv2d_cost(ledger, layer + ".level0", level0_, {channels_, h, w}, repeats);
  for (size_t l = 0; l < deeper_.size(); ++l) {
    h = half_up(h);
    w = half_up(w);
    for (const auto& c : deeper_[l]) add_conv2d_cost(ledger, layer + ".level" + std::to_string(l + 1), c, {channels_, h, w}, repeats);
  }
}

FeatureAlignerImpl::FeatureAlignerImpl(int64_t channels, int levels) : channels_(channels), levels_(levels) {
  if (levels < 1) throw ValidationError("feature aligner needs at least one pyramid level");
  const int64_t head_channels = 3 * taps_;
  for (int l = 0; l < levels; ++l) {
    const std::string base = "level" + std::to_string(l) + "_";
    const int64_t first_in = 2 * channels + (l + 1 < levels ? head_channels : 0);
    std::vector<torch::nn::Conv2d> convs;
    convs.push_back(register_module(base + "offset_conv1", conv3x3(first_in, channels)));
    convs.push_back(register_module(base + "offset_conv2", conv3x3(channels, channels)));
    convs.push_back(register_module(base + "offset_conv3", conv3x3(channels, channels)));
    offset_convs_.push_back(std::move(convs));
    auto head = register_module(base + "offset_head", conv3x3(channels, head_channels));
    zero_conv(head);
    offset_heads_.push_back(head);
    dcns_.push_back(register_module(base + "dcn", DeformConv2d(channels, channels, 3)));
    if (l + 1 < levels) merge_convs_.push_back(register_module(base + "merge", conv3x3(2 * channels, channels)));
  }
  // Starts out passing the reference straight through: weight = [0 | I].
  fusion_ = register_module("fusion", torch::nn::Conv2d(torch::nn::Conv2dOptions(2 * channels, channels, 1)));
  {
    torch::NoGradGuard guard;
    fusion_->weight.zero_();
    fusion_->bias.zero_();
    for (int64_t c = 0; c < channels; ++c) fusion_->weight[c][channels + c].fill_(1.0);
  }
}

torch::Tensor FeatureAlignerImpl::forward(const Pyramid& reference, const Pyramid& neighbor) {
  if (static_cast<int>(reference.size()) != levels_ || static_cast<int>(neighbor.size()) != levels_)
    throw ValidationError("feature aligner: pyramid depth mismatch");
  for (int l = 0; l < levels_; ++l)
    if (!reference[l].sizes().equals(neighbor[l].sizes()))
      throw ValidationError("feature aligner: reference and neighbour shapes differ at level " + std::to_string(l));

  torch::Tensor up_field, up_feat, feat, field;
  for (int l = levels_ - 1; l >= 0; --l) {
    torch::Tensor h = torch::cat({reference[l], neighbor[l]}, 1);
    if (l + 1 < levels_) h = torch::cat({h, up_field}, 1);
    for (auto& c : offset_convs_[l]) h = lrelu(run_conv(c, h));
    field = run_conv(offset_heads_[l], h);
    torch::Tensor offsets = field.narrow(1, 0, 2 * taps_);
    torch::Tensor modulation = 2.0 * torch::sigmoid(field.narrow(1, 2 * taps_, taps_));
    feat = lrelu(dcns_[l]->forward(neighbor[l], offsets, modulation));
    if (l + 1 < levels_) feat = lrelu(run_conv(merge_convs_[l], torch::cat({feat, up_feat}, 1)));
    if (l > 0) {
      const int64_t th = reference[l - 1].size(2), tw = reference[l - 1].size(3);
      torch::Tensor f = resize_to(field, th, tw);
      up_field = torch::cat({f.narrow(1, 0, 2 * taps_) * 2.0, f.narrow(1, 2 * taps_, taps_)}, 1);
      up_feat = resize_to(feat, th, tw);
    } else {
      last_offsets_ = torch::cat({offsets, modulation}, 1).detach();
    }
  }
  return run_conv(fusion_, torch::cat({feat, reference[0]}, 1));
}

void FeatureAlignerImpl::add_cost(CostLedger& ledger, const std::string& layer, const PlaneShape& in,
                                  int64_t repeats) const {
  std::vector<std::pair<int64_t, int64_t>> sizes{{in.height, in.width}};
  for (int l = 1; l < levels_; ++l) sizes.push_back({half_up(sizes.back().first), half_up(sizes.back().second)});
  for (int l = levels_ - 1; l >= 0; --l) {
    const std::string base = layer + ".level" + std::to_string(l);
    const PlaneShape out{channels_, sizes[l].first, sizes[l].second};
    for (const auto& c : offset_convs_[l]) add_conv2d_cost(ledger, base + ".offset", c, out, repeats);
    add_conv2d_cost(ledger, base + ".offset", offset_heads_[l], {3 * taps_, out.height, out.width}, repeats);
    dcns_[l]->add_cost(ledger, base + ".dcn", out, repeats);
    if (l + 1 < levels_) add_conv2d_cost(ledger, base + ".merge", merge_convs_[l], out, repeats);
  }
  add_conv2d_cost(ledger, layer + ".fusion", fusion_, {channels_, in.height, in.width}, repeats);
}

BasicFeedbackModuleImpl::BasicFeedbackModuleImpl(int64_t channels, int levels) {
  extractor = register_module("fe", FeatureExtractor(channels, levels));
  aligner = register_module("fa", FeatureAligner(channels, levels));
}

torch::Tensor BasicFeedbackModuleImpl::align_pair(const torch::Tensor& reference, const torch::Tensor& neighbor) {
  return aligner->forward(extractor->forward(reference), extractor->forward(neighbor));
}

std::vector<torch::Tensor> BasicFeedbackModuleImpl::propagate_group(const std::vector<torch::Tensor>& group) {
  std::vector<torch::Tensor> out;
  for (size_t k = 0; k < group.size(); ++k) out.push_back(k == 0 ? group[0] : align_pair(group[k], group[k - 1]));
  return out;
}

void BasicFeedbackModuleImpl::add_cost(CostLedger& ledger, const std::string& layer, const PlaneShape& in,
                                       int64_t pairs) const {
  if (pairs == 0) return;
  extractor->add_cost(ledger, layer + ".fe", in, 2 * pairs);
  aligner->add_cost(ledger, layer + ".fa", in, pairs);
}

SparseSemanticModuleImpl::SparseSemanticModuleImpl(int64_t channels, int64_t interval, int levels)
    : channels_(channels), interval_(interval), levels_(levels) {
  if (interval < 1) throw ValidationError("sparse semantic module: interval T must be >= 1");
  bfbm = register_module("bfbm", BasicFeedbackModule(channels, levels));
}

void SparseSemanticModuleImpl::set_interval(int64_t interval) {
  if (interval < 1) throw ValidationError("sparse semantic module: interval T must be >= 1");
  interval_ = interval;
}

torch::Tensor SparseSemanticModuleImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 5 || x.size(1) != channels_)
    throw ValidationError("sparse semantic module expects [N," + std::to_string(channels_) + ",D,H,W]");
  const int64_t n = x.size(0), d = x.size(2), h = x.size(3), w = x.size(4);
  const GroupPartition part = sparse_group(d, interval_);

  std::vector<int64_t> ref_pos, nbr_pos;
  int64_t start = 0;
  for (const auto& g : part.groups) {
    for (size_t k = 1; k < g.size(); ++k) {
      ref_pos.push_back(start + static_cast<int64_t>(k));
      nbr_pos.push_back(start + static_cast<int64_t>(k) - 1);
    }
    start += static_cast<int64_t>(g.size());
  }
  if (ref_pos.empty()) return x;

  auto index = [&](const std::vector<int64_t>& v) { return torch::tensor(v, torch::dtype(torch::kLong).device(x.device())); };
  const int64_t pairs = static_cast<int64_t>(ref_pos.size());
  torch::Tensor ordered = x.transpose(1, 2).index_select(1, index(part.order));  // [N,D,C,H,W]
  torch::Tensor rp = index(ref_pos);
  torch::Tensor ref = ordered.index_select(1, rp).reshape({n * pairs, channels_, h, w});
  torch::Tensor nbr = ordered.index_select(1, index(nbr_pos)).reshape({n * pairs, channels_, h, w});
  torch::Tensor aligned = bfbm->align_pair(ref, nbr).view({n, pairs, channels_, h, w});
  torch::Tensor out = ordered.index_copy(1, rp, aligned).index_select(1, index(part.inverse_perm));
  return out.transpose(1, 2).contiguous();
}

void SparseSemanticModuleImpl::add_cost(CostLedger& ledger, const std::string& layer, const VolumeShape& in) const {
  const GroupPartition part = sparse_group(in.depth, interval_);
  bfbm->add_cost(ledger, layer + ".bfbm", {in.channels, in.height, in.width}, part.aligned_frames());
}

}  // namespace fsts
