#include "feedbacksts/cost.hpp"

#include <numeric>

namespace fsts {

double CostLedger::total() const {
  return std::accumulate(entries_.begin(), entries_.end(), 0.0,
                         [](double acc, const Entry& e) { return acc + e.flops; });
}

double CostLedger::total_with_prefix(const std::string& prefix) const {
  double acc = 0.0;
  for (const auto& e : entries_)
    if (e.layer.compare(0, prefix.size(), prefix) == 0) acc += e.flops;
  return acc;
}

namespace {
thread_local int tally_depth = 0;
thread_local double tally_count = 0.0;

int64_t kernel_volume(const c10::IntArrayRef& k) {
  int64_t v = 1;
  for (auto d : k) v *= d;
  return v;
}
}  // namespace

MacTally::Scope::Scope() {
  if (tally_depth++ == 0) tally_count = 0.0;
}
MacTally::Scope::~Scope() { --tally_depth; }
double MacTally::Scope::count() const { return tally_count; }

bool MacTally::active() { return tally_depth > 0; }
void MacTally::add(double macs) {
  if (tally_depth > 0) tally_count += macs;
}

torch::Tensor run_conv(torch::nn::Conv2d& conv, const torch::Tensor& x) {
  torch::Tensor y = conv->forward(x);
  if (MacTally::active()) {
    const auto& o = conv->options;
    MacTally::add(static_cast<double>(y.numel()) * (o.in_channels() / o.groups()) * kernel_volume(o.kernel_size()));
  }
  return y;
}

torch::Tensor run_conv(torch::nn::Conv3d& conv, const torch::Tensor& x) {
  torch::Tensor y = conv->forward(x);
  if (MacTally::active()) {
    const auto& o = conv->options;
    MacTally::add(static_cast<double>(y.numel()) * (o.in_channels() / o.groups()) * kernel_volume(o.kernel_size()));
  }
  return y;
}

void add_conv2d_cost(CostLedger& ledger, const std::string& layer, const torch::nn::Conv2d& conv,
                     const PlaneShape& out, int64_t repeats) {
  const auto& o = conv->options;
  ledger.add(layer, repeats * conv_flops(o.out_channels() * out.height * out.width, o.in_channels() / o.groups(),
                                         kernel_volume(o.kernel_size())));
}

void add_conv3d_cost(CostLedger& ledger, const std::string& layer, const torch::nn::Conv3d& conv,
                     const VolumeShape& out) {
  const auto& o = conv->options;
  ledger.add(layer, conv_flops(o.out_channels() * out.depth * out.height * out.width, o.in_channels() / o.groups(),
                               kernel_volume(o.kernel_size())));
}

}  // namespace fsts
