#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "feedbacksts/backbone.hpp"
#include "feedbacksts/cost.hpp"

namespace fsts {

/// Element count over all trainable tensors.
int64_t count_params(const torch::nn::Module& module);

/// Per-layer analytic cost of one forward at input (D, H, W), batch 1.
CostLedger flops_ledger(const FeedbackNet& net, int64_t depth, int64_t height, int64_t width);
double count_flops(const FeedbackNet& net, int64_t depth, int64_t height, int64_t width);

struct ProfileReport {
  std::string variant;
  int64_t interval = 0;
  int64_t depth = 0, height = 0, width = 0;
  int64_t param_count = 0;
  double flops = 0.0;
  std::optional<double> fps;  // frames per second on this machine
  std::string environment;

  nlohmann::json to_json() const;
  static std::string csv_header();
  std::string csv_row() const;
};

/// Short description of where timings were taken (device, threads, torch version).
std::string environment_tag(const torch::Device& device);

/// Params and FLOPs; when `timing_runs` > 0 also measures eval-mode throughput
/// on random input (after one warm-up pass).
ProfileReport profile_network(FeedbackNet& net, int64_t depth, int64_t height, int64_t width, int timing_runs = 0,
                              const torch::Device& device = torch::kCPU);

}  // namespace fsts
