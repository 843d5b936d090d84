#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "feedbacksts/cost.hpp"
#include "feedbacksts/sparse_semantic.hpp"

namespace fsts {

/// Block pattern of a backbone variant. Encoder patterns have 5 symbols
/// (conv_1..conv_5), decoder patterns 4 (dec_conv_1..dec_conv_4, full
/// resolution first). '+' forward refinement, '-' backward refinement,
/// '~' plain residual block.
struct VariantSpec {
  std::string name;
  std::string encoder;
  std::string decoder;

  static VariantSpec parse(const std::string& name);
  static const std::vector<VariantSpec>& all();
};

struct NetworkConfig {
  std::string variant = "Full-FB";
  std::vector<int64_t> channels{8, 16, 32, 64, 128};
  int64_t in_channels = 1;
  int64_t interval = 2;
  int pyramid_levels = 2;
  /// Output-head bias starts at logit(head_prior), so training begins from a
  /// mostly-background prediction.
  double head_prior = 0.01;
  /// Abort the forward pass with NonFiniteError when a stage emits NaN/Inf.
  bool check_finite = true;

  void validate() const;
};

class PlainBlockImpl : public torch::nn::Module {
 public:
  PlainBlockImpl(int64_t in_channels, int64_t out_channels);
  torch::Tensor forward(const torch::Tensor& x);
  void add_cost(CostLedger& ledger, const std::string& layer, const VolumeShape& out) const;

 private:
  torch::nn::Conv3d conv1_{nullptr}, conv2_{nullptr}, shortcut_{nullptr};
  torch::nn::BatchNorm3d bn1_{nullptr}, bn2_{nullptr}, shortcut_bn_{nullptr};
};
TORCH_MODULE(PlainBlock);

enum class Direction { Forward, Backward };

/// Spatio-temporal refinement: a 3D context branch plus a 1x1x1 projection
/// fed through the sparse semantic module. The backward direction runs the
/// SSM on the time-reversed projection and flips the result back.
class RefinementModuleImpl : public torch::nn::Module {
 public:
  RefinementModuleImpl(int64_t in_channels, int64_t out_channels, Direction direction, int64_t interval, int levels);
  torch::Tensor forward(const torch::Tensor& x);
  /// Decoder form: `deep` and `skip` are concatenated on the channel axis.
  torch::Tensor forward(const torch::Tensor& deep, const torch::Tensor& skip);

  torch::Tensor context(const torch::Tensor& x);
  torch::Tensor propagation(const torch::Tensor& x);

  void add_cost(CostLedger& ledger, const std::string& layer, const VolumeShape& out) const;
  Direction direction() const { return direction_; }

  SparseSemanticModule ssm{nullptr};

 private:
  Direction direction_;
  torch::nn::Conv3d conv1_{nullptr}, conv2_{nullptr}, proj_{nullptr};
  torch::nn::BatchNorm3d bn1_{nullptr}, bn2_{nullptr};
};
TORCH_MODULE(RefinementModule);

/// One encoder or decoder block, either plain or refining.
class StageBlockImpl : public torch::nn::Module {
 public:
  StageBlockImpl(char kind, int64_t in_channels, int64_t out_channels, int64_t interval, int levels);
  torch::Tensor forward(const torch::Tensor& x);
  void add_cost(CostLedger& ledger, const std::string& layer, const VolumeShape& out) const;
  char kind() const { return kind_; }

  PlainBlock plain{nullptr};
  RefinementModule refine{nullptr};

 private:
  char kind_;
};
TORCH_MODULE(StageBlock);

/// Upsamples `deep` spatially to the size of `skip` and concatenates [up, skip].
torch::Tensor merge_skip(const torch::Tensor& deep, const torch::Tensor& skip);

/// 3D U-shaped detector. Input [N, C_in, D, H, W] with H and W divisible by
/// 16; output per-pixel target probabilities [N, 1, D, H, W].
class FeedbackNetImpl : public torch::nn::Module {
 public:
  explicit FeedbackNetImpl(NetworkConfig config);

  torch::Tensor forward(const torch::Tensor& x);
  torch::Tensor forward_logits(const torch::Tensor& x);

  /// Analytic per-layer cost of one forward pass on a [1, C_in, D, H, W] input.
  void add_cost(CostLedger& ledger, const VolumeShape& input) const;

  /// Stage outputs to keep during forward ("conv_1".."conv_5", "dec_conv_1".."dec_conv_4", "head").
  void set_capture(std::set<std::string> layers);
  const std::map<std::string, torch::Tensor>& captured() const { return captured_; }
  static std::vector<std::string> layer_names();

  void set_interval(int64_t interval);
  const NetworkConfig& config() const { return config_; }
  const VariantSpec& variant() const { return variant_; }

 private:
  torch::Tensor stage_output(const std::string& layer, torch::Tensor y);

  NetworkConfig config_;
  VariantSpec variant_;
  std::vector<StageBlock> encoder_;
  std::vector<torch::nn::Conv3d> down_;  // down_[i-1] feeds encoder stage i
  std::vector<StageBlock> decoder_;      // decoder_[j] is dec_conv_{j+1}
  torch::nn::Conv3d head_{nullptr};
  std::set<std::string> capture_;
  std::map<std::string, torch::Tensor> captured_;
};
TORCH_MODULE(FeedbackNet);

}  // namespace fsts
