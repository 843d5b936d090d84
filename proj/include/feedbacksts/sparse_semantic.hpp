#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "feedbacksts/cost.hpp"

namespace fsts {

/// Interval grouping of the frame axis. Indices are 0-based: group x holds
/// frames {x, x+T, ..., x+M_x*T} with M_x = floor((D-1-x)/T).
struct GroupPartition {
  int64_t length = 0;
  int64_t interval = 0;
  std::vector<std::vector<int64_t>> groups;
  std::vector<int64_t> order;         // concatenation of the groups
  std::vector<int64_t> inverse_perm;  // inverse_perm[d] = position of frame d in `order`

  /// Number of frames that go through feature alignment (sum of M_x).
  int64_t aligned_frames() const;
};

GroupPartition sparse_group(int64_t length, int64_t interval);

/// Flips the frame axis: [N,C,D,H,W] (dim 2) or [C,D,H,W] (dim 1).
torch::Tensor depth_reverse(const torch::Tensor& x);

/// Modulated deformable convolution, stride 1, "same" zero padding.
/// input [B,C,H,W]; offset [B,2K,H,W] as (dy,dx) per tap; mask [B,K,H,W];
/// weight [O,C,kh,kw]. Samples outside the image read as zero.
torch::Tensor deform_conv2d(const torch::Tensor& input, const torch::Tensor& offset, const torch::Tensor& mask,
                            const torch::Tensor& weight, const torch::Tensor& bias);

class DeformConv2dImpl : public torch::nn::Module {
 public:
  DeformConv2dImpl(int64_t in_channels, int64_t out_channels, int64_t kernel_size = 3);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& offset, const torch::Tensor& mask);
  void add_cost(CostLedger& ledger, const std::string& layer, const PlaneShape& out, int64_t repeats) const;
  int64_t taps() const { return kernel_size_ * kernel_size_; }

  torch::Tensor weight;
  torch::Tensor bias;

 private:
  int64_t in_channels_;
  int64_t kernel_size_;
};
TORCH_MODULE(DeformConv2d);

/// Feature pyramid, level 0 at full resolution, each of shape [B,C,H_l,W_l].
using Pyramid = std::vector<torch::Tensor>;

/// Per-frame pyramid extraction. Level 0 is a residual 3x3 transform (zero
/// initialised, so it starts as the identity); each deeper level halves the
/// resolution with a stride-2 convolution followed by two 3x3 convolutions.
class FeatureExtractorImpl : public torch::nn::Module {
 public:
  FeatureExtractorImpl(int64_t channels, int levels);
  Pyramid forward(const torch::Tensor& x);
  void add_cost(CostLedger& ledger, const std::string& layer, const PlaneShape& in, int64_t repeats) const;
  int levels() const { return levels_; }

 private:
  int64_t channels_;
  int levels_;
  torch::nn::Conv2d level0_{nullptr};
  std::vector<std::vector<torch::nn::Conv2d>> deeper_;
};
TORCH_MODULE(FeatureExtractor);

/// Coarse-to-fine deformable registration of a neighbour pyramid onto a
/// reference pyramid, followed by a 1x1 fusion of [aligned, reference].
class FeatureAlignerImpl : public torch::nn::Module {
 public:
  FeatureAlignerImpl(int64_t channels, int levels);
  torch::Tensor forward(const Pyramid& reference, const Pyramid& neighbor);
  void add_cost(CostLedger& ledger, const std::string& layer, const PlaneShape& in, int64_t repeats) const;

  /// Offset and modulation map of the finest level from the last forward
  /// (offsets [B,2K,H,W], modulation [B,K,H,W]); for inspection.
  const torch::Tensor& last_offsets() const { return last_offsets_; }

 private:
  int64_t channels_;
  int levels_;
  int64_t taps_ = 9;
  std::vector<std::vector<torch::nn::Conv2d>> offset_convs_;
  std::vector<torch::nn::Conv2d> offset_heads_;
  std::vector<DeformConv2d> dcns_;
  std::vector<torch::nn::Conv2d> merge_convs_;  // levels finer than the coarsest
  torch::nn::Conv2d fusion_{nullptr};
  torch::Tensor last_offsets_;
};
TORCH_MODULE(FeatureAligner);

/// Basic feedback module: FA(FE(reference), FE(neighbour)) with one set of
/// weights for every frame and every group.
class BasicFeedbackModuleImpl : public torch::nn::Module {
 public:
  BasicFeedbackModuleImpl(int64_t channels, int levels);

  /// reference, neighbour [B,C,H,W] -> aligned [B,C,H,W].
  torch::Tensor align_pair(const torch::Tensor& reference, const torch::Tensor& neighbor);
  /// Output 0 is the first input unchanged; output k aligns input k-1 onto input k.
  std::vector<torch::Tensor> propagate_group(const std::vector<torch::Tensor>& group);

  /// Cost of aligning `pairs` frame pairs at shape `in`.
  void add_cost(CostLedger& ledger, const std::string& layer, const PlaneShape& in, int64_t pairs) const;

  FeatureExtractor extractor{nullptr};
  FeatureAligner aligner{nullptr};
};
TORCH_MODULE(BasicFeedbackModule);

/// Sparse semantic module: group frames at interval T, propagate inside each
/// group with the shared BFBM, then restore the original frame order.
class SparseSemanticModuleImpl : public torch::nn::Module {
 public:
  SparseSemanticModuleImpl(int64_t channels, int64_t interval, int levels);

  /// x [N,C,D,H,W] -> same shape.
  torch::Tensor forward(const torch::Tensor& x);
  void add_cost(CostLedger& ledger, const std::string& layer, const VolumeShape& in) const;

  int64_t interval() const { return interval_; }
  void set_interval(int64_t interval);
  int levels() const { return levels_; }

  BasicFeedbackModule bfbm{nullptr};

 private:
  int64_t channels_;
  int64_t interval_;
  int levels_;
};
TORCH_MODULE(SparseSemanticModule);

}  // namespace fsts
