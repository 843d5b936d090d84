#include "feedbacksts/profiler.hpp"

#include <chrono>
#include <cstdio>

#include "feedbacksts/error.hpp"

namespace fsts {

int64_t count_params(const torch::nn::Module& module) {
  int64_t n = 0;
  for (const auto& p : module.parameters())
    if (p.requires_grad()) n += p.numel();
  return n;
}

CostLedger flops_ledger(const FeedbackNet& net, int64_t depth, int64_t height, int64_t width) {
  if (depth < 1 || height < 16 || width < 16 || height % 16 || width % 16)
    throw ValidationError("profile shape must have D >= 1 and H, W positive multiples of 16");
  CostLedger ledger;
  net->add_cost(ledger, {net->config().in_channels, depth, height, width});
  return ledger;
}

double count_flops(const FeedbackNet& net, int64_t depth, int64_t height, int64_t width) {
  return flops_ledger(net, depth, height, width).total();
}

nlohmann::json ProfileReport::to_json() const {
  nlohmann::json j{{"variant", variant},
                   {"interval", interval},
                   {"input_shape", {depth, height, width}},
                   {"param_count", param_count},
                   {"flops", flops},
                   {"environment", environment}};
  j["fps"] = fps ? nlohmann::json(*fps) : nlohmann::json(nullptr);
  return j;
}

std::string ProfileReport::csv_header() { return "variant,interval,depth,height,width,params,flops,fps"; }

std::string ProfileReport::csv_row() const {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s,%lld,%lld,%lld,%lld,%lld,%.6f,", variant.c_str(), static_cast<long long>(interval),
                static_cast<long long>(depth), static_cast<long long>(height), static_cast<long long>(width),
                static_cast<long long>(param_count), flops);
  std::string row = buf;
  if (fps) {
    std::snprintf(buf, sizeof(buf), "%.4f", *fps);
    row += buf;
  }
  return row;
}

std::string environment_tag(const torch::Device& device) {
  return std::string(device.is_cuda() ? "cuda" : "cpu") + ", " + std::to_string(at::get_num_threads()) +
         " threads, libtorch " + TORCH_VERSION;
}

ProfileReport profile_network(FeedbackNet& net, int64_t depth, int64_t height, int64_t width, int timing_runs,
                              const torch::Device& device) {
  ProfileReport r;
  r.variant = net->config().variant;
  r.interval = net->config().interval;
  r.depth = depth;
  r.height = height;
  r.width = width;
  r.param_count = count_params(*net);
  r.flops = count_flops(net, depth, height, width);
  r.environment = environment_tag(device);
  if (timing_runs > 0) {
    torch::NoGradGuard guard;
    net->eval();
    net->to(device);
    torch::Tensor x = torch::rand({1, net->config().in_channels, depth, height, width}, torch::device(device));
    net->forward(x);
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < timing_runs; ++i) net->forward(x);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.fps = static_cast<double>(timing_runs * depth) / secs;
  }
  return r;
}

}  // namespace fsts
