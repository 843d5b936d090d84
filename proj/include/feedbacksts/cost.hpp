#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace fsts {

/// Spatial shape of one frame-wise feature map.
struct PlaneShape {
  int64_t channels = 0;
  int64_t height = 0;
  int64_t width = 0;
};

/// Shape of a FeatureVolume without the batch axis.
struct VolumeShape {
  int64_t channels = 0;
  int64_t depth = 0;
  int64_t height = 0;
  int64_t width = 0;
};

/// Analytic per-layer compute account. One FLOP is one multiply-accumulate;
/// normalisation, activations, interpolation and element-wise adds are free.
class CostLedger {
 public:
  struct Entry {
    std::string layer;
    double flops = 0.0;
  };

  void add(const std::string& layer, double flops) { entries_.push_back({layer, flops}); }
  const std::vector<Entry>& entries() const { return entries_; }
  double total() const;
  /// Sums entries whose layer name starts with `prefix`.
  double total_with_prefix(const std::string& prefix) const;

 private:
  std::vector<Entry> entries_;
};

/// MACs of a dense convolution producing `out_elems` outputs per image.
inline double conv_flops(int64_t out_elems, int64_t in_channels, int64_t kernel_volume) {
  return static_cast<double>(out_elems) * static_cast<double>(in_channels) * static_cast<double>(kernel_volume);
}

/// Runtime MAC counter fed by every convolution as it executes. Used to check
/// the analytic ledger against what a forward pass actually computes.
class MacTally {
 public:
  class Scope {
   public:
    Scope();
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;
    double count() const;
  };

  static bool active();
  static void add(double macs);
};

/// Conv wrappers that report their MACs (summed over the batch) to MacTally.
torch::Tensor run_conv(torch::nn::Conv2d& conv, const torch::Tensor& x);
torch::Tensor run_conv(torch::nn::Conv3d& conv, const torch::Tensor& x);

void add_conv2d_cost(CostLedger& ledger, const std::string& layer, const torch::nn::Conv2d& conv,
                     const PlaneShape& out, int64_t repeats);
void add_conv3d_cost(CostLedger& ledger, const std::string& layer, const torch::nn::Conv3d& conv,
                     const VolumeShape& out);

}  // namespace fsts
