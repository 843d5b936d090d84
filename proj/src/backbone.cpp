#include "feedbacksts/backbone.hpp"

#include <algorithm>
#include <cmath>

#include "feedbacksts/error.hpp"

namespace fsts {

namespace F = torch::nn::functional;

namespace {

torch::nn::Conv3d conv3(int64_t in, int64_t out, bool bias = true) {
  return torch::nn::Conv3d(torch::nn::Conv3dOptions(in, out, 3).padding(1).bias(bias));
}

torch::nn::Conv3d conv1(int64_t in, int64_t out) { return torch::nn::Conv3d(torch::nn::Conv3dOptions(in, out, 1)); }

bool valid_pattern(const std::string& p, size_t len) {
  return p.size() == len && p.find_first_not_of("+-~") == std::string::npos;
}

}  // namespace

const std::vector<VariantSpec>& VariantSpec::all() {
  static const std::vector<VariantSpec> kVariants = {
      {"Full-FB", "+++++", "----"},  {"Dec-NoFB", "+++++", "~~~~"}, {"Enc-NoFB", "~~~~~", "----"},
      {"All-Fwd", "+++++", "++++"},  {"All-Bwd", "-----", "----"},  {"Part-FB1", "+~+~+", "-~-~"},
      {"Part-FB2", "+~+~+", "~-~-"},
  };
  return kVariants;
}

VariantSpec VariantSpec::parse(const std::string& name) {
  std::string valid;
  for (const auto& v : all()) {
    if (v.name == name) return v;
    valid += (valid.empty() ? "" : ", ") + v.name;
  }
  throw ValidationError("unknown variant '" + name + "' (valid: " + valid + ")");
}

void NetworkConfig::validate() const {
  VariantSpec::parse(variant);
  if (channels.size() != 5) throw ValidationError("model.channels must list 5 stage widths");
  for (auto c : channels)
    if (c < 1) throw ValidationError("model.channels must be positive");
  if (in_channels < 1) throw ValidationError("model.in_channels must be >= 1");
  if (interval < 1) throw ValidationError("model.interval must be >= 1");
  if (pyramid_levels < 1) throw ValidationError("model.pyramid_levels must be >= 1");
  if (!(head_prior > 0.0 && head_prior < 1.0)) throw ValidationError("model.head_prior must lie in (0,1)");
}

PlainBlockImpl::PlainBlockImpl(int64_t in_channels, int64_t out_channels) {
  conv1_ = register_module("conv1", conv3(in_channels, out_channels));
  bn1_ = register_module("bn1", torch::nn::BatchNorm3d(out_channels));
  conv2_ = register_module("conv2", conv3(out_channels, out_channels));
  bn2_ = register_module("bn2", torch::nn::BatchNorm3d(out_channels));
  if (in_channels != out_channels) {
    shortcut_ = register_module("shortcut", conv3(in_channels, out_channels, false));
    shortcut_bn_ = register_module("shortcut_bn", torch::nn::BatchNorm3d(out_channels));
  }
}

torch::Tensor PlainBlockImpl::forward(const torch::Tensor& x) {
  torch::Tensor y = torch::relu(bn1_->forward(run_conv(conv1_, x)));
  y = bn2_->forward(run_conv(conv2_, y));
  torch::Tensor s = shortcut_ ? shortcut_bn_->forward(run_conv(shortcut_, x)) : x;
  return torch::relu(y + s);
}

void PlainBlockImpl::add_cost(CostLedger& ledger, const std::string& layer, const VolumeShape& out) const {
  add_conv3d_cost(ledger, layer + ".conv1", conv1_, out);
  add_conv3d_cost(ledger, layer + ".conv2", conv2_, out);
  if (shortcut_) add_conv3d_cost(ledger, layer + ".shortcut", shortcut_, out);
}

RefinementModuleImpl::RefinementModuleImpl(int64_t in_channels, int64_t out_channels, Direction direction,
                                           int64_t interval, int levels)
    : direction_(direction) {
  conv1_ = register_module("conv1", conv3(in_channels, out_channels));
  bn1_ = register_module("bn1", torch::nn::BatchNorm3d(out_channels));
  conv2_ = register_module("conv2", conv3(out_channels, out_channels));
  bn2_ = register_module("bn2", torch::nn::BatchNorm3d(out_channels));
  proj_ = register_module("proj", conv1(in_channels, out_channels));
  ssm = register_module("ssm", SparseSemanticModule(out_channels, interval, levels));
}

torch::Tensor RefinementModuleImpl::context(const torch::Tensor& x) {
  torch::Tensor y = torch::relu(bn1_->forward(run_conv(conv1_, x)));
  return bn2_->forward(run_conv(conv2_, y));
}

torch::Tensor RefinementModuleImpl::propagation(const torch::Tensor& x) {
  torch::Tensor p = run_conv(proj_, x);
  if (direction_ == Direction::Forward) return ssm->forward(p);
  return depth_reverse(ssm->forward(depth_reverse(p)));
}

torch::Tensor RefinementModuleImpl::forward(const torch::Tensor& x) { return context(x) + propagation(x); }

torch::Tensor RefinementModuleImpl::forward(const torch::Tensor& deep, const torch::Tensor& skip) {
  return forward(merge_skip(deep, skip));
}

void RefinementModuleImpl::add_cost(CostLedger& ledger, const std::string& layer, const VolumeShape& out) const {
  add_conv3d_cost(ledger, layer + ".conv1", conv1_, out);
  add_conv3d_cost(ledger, layer + ".conv2", conv2_, out);
  add_conv3d_cost(ledger, layer + ".proj", proj_, out);
  ssm->add_cost(ledger, layer + ".ssm", out);
}

StageBlockImpl::StageBlockImpl(char kind, int64_t in_channels, int64_t out_channels, int64_t interval, int levels)
    : kind_(kind) {
  if (kind == '~') {
    plain = register_module("plain", PlainBlock(in_channels, out_channels));
  } else if (kind == '+' || kind == '-') {
    refine = register_module("refine", RefinementModule(in_channels, out_channels,
                                                        kind == '+' ? Direction::Forward : Direction::Backward,
                                                        interval, levels));
  } else {
    throw ValidationError(std::string("unknown block symbol '") + kind + "'");
  }
}

torch::Tensor StageBlockImpl::forward(const torch::Tensor& x) {
  return plain ? plain->forward(x) : refine->forward(x);
}

void StageBlockImpl::add_cost(CostLedger& ledger, const std::string& layer, const VolumeShape& out) const {
  if (plain) plain->add_cost(ledger, layer, out);
  else refine->add_cost(ledger, layer, out);
}

torch::Tensor merge_skip(const torch::Tensor& deep, const torch::Tensor& skip) {
  if (deep.dim() != 5 || skip.dim() != 5) throw ValidationError("decoder inputs must be [N,C,D,H,W]");
  if (deep.size(0) != skip.size(0) || deep.size(2) != skip.size(2))
    throw ValidationError("decoder inputs disagree on batch or frame count (" + std::to_string(deep.size(2)) +
                          " vs " + std::to_string(skip.size(2)) + " frames)");
  torch::Tensor up = F::interpolate(deep, F::InterpolateFuncOptions()
                                              .size(std::vector<int64_t>{skip.size(2), skip.size(3), skip.size(4)})
                                              .mode(torch::kTrilinear)
                                              .align_corners(false));
  return torch::cat({up, skip}, 1);
}

FeedbackNetImpl::FeedbackNetImpl(NetworkConfig config) : config_(std::move(config)) {
  config_.validate();
  variant_ = VariantSpec::parse(config_.variant);
  if (!valid_pattern(variant_.encoder, 5) || !valid_pattern(variant_.decoder, 4))
    throw ValidationError("malformed variant pattern for " + variant_.name);
  const auto& ch = config_.channels;
  for (int i = 0; i < 5; ++i) {
    const int64_t cin = i == 0 ? config_.in_channels : ch[i - 1];
    if (i > 0) {
      down_.push_back(register_module(
          "down_" + std::to_string(i + 1),
          torch::nn::Conv3d(torch::nn::Conv3dOptions(ch[i - 1], ch[i - 1], {1, 2, 2}).stride({1, 2, 2}))));
    }
    encoder_.push_back(register_module("conv_" + std::to_string(i + 1),
                                       StageBlock(variant_.encoder[i], cin, ch[i], config_.interval,
                                                  config_.pyramid_levels)));
  }
  for (int j = 0; j < 4; ++j) {
    decoder_.push_back(register_module("dec_conv_" + std::to_string(j + 1),
                                       StageBlock(variant_.decoder[j], ch[j + 1] + ch[j], ch[j], config_.interval,
                                                  config_.pyramid_levels)));
  }
  head_ = register_module("head", conv1(ch[0], 1));
  torch::NoGradGuard guard;
  head_->bias.fill_(std::log(config_.head_prior / (1.0 - config_.head_prior)));
}

std::vector<std::string> FeedbackNetImpl::layer_names() {
  return {"conv_1",     "conv_2",     "conv_3",     "conv_4", "conv_5",
          "dec_conv_4", "dec_conv_3", "dec_conv_2", "dec_conv_1", "head"};
}

void FeedbackNetImpl::set_capture(std::set<std::string> layers) {
  const auto names = layer_names();
  for (const auto& l : layers) {
    if (std::find(names.begin(), names.end(), l) != names.end()) continue;
    std::string valid;
    for (const auto& n : names) valid += (valid.empty() ? "" : ", ") + n;
    throw ValidationError("unknown layer '" + l + "' (valid: " + valid + ")");
  }
  capture_ = std::move(layers);
  captured_.clear();
}

void FeedbackNetImpl::set_interval(int64_t interval) {
  if (interval < 1) throw ValidationError("interval T must be >= 1");
  config_.interval = interval;
  for (auto* blocks : {&encoder_, &decoder_})
    for (auto& b : *blocks)
      if (b->refine) b->refine->ssm->set_interval(interval);
}

torch::Tensor FeedbackNetImpl::stage_output(const std::string& layer, torch::Tensor y) {
  if (config_.check_finite && !torch::isfinite(y).all().item<bool>()) throw NonFiniteError(layer);
  if (capture_.count(layer)) captured_[layer] = y.detach();
  return y;
}

torch::Tensor FeedbackNetImpl::forward_logits(const torch::Tensor& x) {
  if (x.dim() != 5 || x.size(1) != config_.in_channels)
    throw ValidationError("network input must be [N," + std::to_string(config_.in_channels) + ",D,H,W]");
  if (x.size(2) < 1) throw ValidationError("network input has no frames");
  if (x.size(3) % 16 != 0 || x.size(4) % 16 != 0 || x.size(3) == 0 || x.size(4) == 0)
    throw ValidationError("network input height and width must be positive multiples of 16 (got " +
                          std::to_string(x.size(3)) + "x" + std::to_string(x.size(4)) + ")");
  captured_.clear();
  std::vector<torch::Tensor> skips;
  torch::Tensor y = x;
  for (int i = 0; i < 5; ++i) {
    if (i > 0) y = run_conv(down_[i - 1], y);
    y = stage_output("conv_" + std::to_string(i + 1), encoder_[i]->forward(y));
    skips.push_back(y);
  }
  for (int j = 3; j >= 0; --j)
    y = stage_output("dec_conv_" + std::to_string(j + 1), decoder_[j]->forward(merge_skip(y, skips[j])));
  return stage_output("head", run_conv(head_, y));
}

torch::Tensor FeedbackNetImpl::forward(const torch::Tensor& x) { return torch::sigmoid(forward_logits(x)); }

void FeedbackNetImpl::add_cost(CostLedger& ledger, const VolumeShape& input) const {
  const auto& ch = config_.channels;
  int64_t h = input.height, w = input.width;
  for (int i = 0; i < 5; ++i) {
    if (i > 0) {
      h /= 2;
      w /= 2;
      add_conv3d_cost(ledger, "down_" + std::to_string(i + 1), down_[i - 1], {ch[i - 1], input.depth, h, w});
    }
    encoder_[i]->add_cost(ledger, "conv_" + std::to_string(i + 1), {ch[i], input.depth, h, w});
  }
  for (int j = 3; j >= 0; --j) {
    const int64_t s = int64_t{1} << j;
    decoder_[j]->add_cost(ledger, "dec_conv_" + std::to_string(j + 1), {ch[j], input.depth, input.height / s, input.width / s});
  }
  add_conv3d_cost(ledger, "head", head_, {1, input.depth, input.height, input.width});
}

}  // namespace fsts
