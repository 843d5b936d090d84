#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "feedbacksts/backbone.hpp"
#include "feedbacksts/error.hpp"
#include "feedbacksts/metrics.hpp"
#include "feedbacksts/sequence.hpp"

namespace fsts {

namespace fs = std::filesystem;

struct TrainConfig {
  double lr0 = 1e-5;
  std::vector<int> milestones{5, 10, 15, 20, 25, 30};
  double gamma = 0.5;
  int epochs = 30;
  int batch_size = 4;
  uint64_t seed = 0;
  double smooth_eps = 1e-6;
  int window_length = 5;
  int input_size = 256;
  PrepareMode prepare = PrepareMode::CropThenResize;
  bool augment = true;
  double grad_clip = 0.0;  // max global grad norm; 0 disables

  void validate() const;
};

/// 1 - (sum pg + eps) / (sum p + sum g - sum pg + eps), reduced jointly over
/// every pixel and frame of each window and averaged over the batch.
/// pred/target [N, ...]; `frame_weight` [N, D] (or undefined) zeroes padded
/// frames when pred/target are [N, 1, D, H, W].
torch::Tensor soft_iou_loss(const torch::Tensor& pred, const torch::Tensor& target, double eps = 1e-6,
                            const torch::Tensor& frame_weight = {});

/// lr0 * gamma^(number of milestones <= epoch); epochs start at 1.
double lr_at(int epoch, const TrainConfig& cfg);

using WindowSplitter = std::vector<SlidingWindow> (*)(const FrameSequence&, int);
/// Both phases tile sequences with the same splitter.
WindowSplitter training_splitter();
WindowSplitter inference_splitter();

/// Builds the network with torch's RNG seeded, so initial weights depend on `seed` only.
FeedbackNet make_network(const NetworkConfig& config, uint64_t seed);

/// Per-frame score maps for a whole sequence in sliding-window mode, on the
/// device that holds the network. Frames whose size is not a multiple of 16
/// are edge-padded and cropped back. `after_window` runs after each forward.
using WindowHook = std::function<void(const SlidingWindow&, FeedbackNet&)>;
std::vector<FloatPlane> predict_sequence(FeedbackNet& net, const FrameSequence& seq, int window_length,
                                         const WindowHook& after_window = {});

struct EpochStats {
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double train_miou = 0.0;  // running, train-mode predictions at 0.5
  int steps = 0;
};

nlohmann::json to_json(const EpochStats& s);
EpochStats epoch_stats_from_json(const nlohmann::json& j);

/// Raised when the loss or an activation stops being finite.
class DivergenceError : public RuntimeFailure {
 public:
  DivergenceError(const std::string& what, int epoch, int batch, double lr)
      : RuntimeFailure(what), epoch_(epoch), batch_(batch), lr_(lr) {}
  int epoch() const { return epoch_; }
  int batch() const { return batch_; }
  double lr() const { return lr_; }

 private:
  int epoch_, batch_;
  double lr_;
};

struct CheckpointInfo {
  int epoch = 0;
  nlohmann::json config;
  std::vector<EpochStats> history;
  int64_t global_step = 0;
  std::string rng_state;  // serialized std::mt19937_64
};

class Trainer {
 public:
  /// `config_echo` is stored verbatim in every checkpoint.
  Trainer(FeedbackNet net, TrainConfig cfg, nlohmann::json config_echo = nlohmann::json::object());

  /// Runs epochs (resume_epoch+1)..cfg.epochs. When `run_dir` is set, appends
  /// to train_log.csv and writes ckpt_epoch_<e>.pt after every epoch.
  std::vector<EpochStats> fit(const std::vector<FrameSequence>& data, const std::optional<fs::path>& run_dir);

  void save_checkpoint(const fs::path& path, int epoch) const;
  /// Restores weights (and optimizer state when given) from `path`.
  static CheckpointInfo load_checkpoint(const fs::path& path, FeedbackNet& net, torch::optim::Adam* optimizer);
  void resume(const fs::path& path);

  /// Called after every epoch with its stats.
  std::function<void(const EpochStats&)> on_epoch;

  FeedbackNet& net() { return net_; }
  torch::optim::Adam& optimizer() { return optimizer_; }
  const std::vector<EpochStats>& history() const { return history_; }
  int completed_epochs() const { return completed_; }

 private:
  EpochStats run_epoch(int epoch, const std::vector<FrameSequence>& data, const std::optional<fs::path>& run_dir);

  FeedbackNet net_;
  TrainConfig cfg_;
  nlohmann::json config_echo_;
  torch::optim::Adam optimizer_;
  std::vector<EpochStats> history_;
  int completed_ = 0;
  int64_t global_step_ = 0;
  std::mt19937_64 rng_;
};

std::string checkpoint_name(int epoch);

/// Reads only the metadata (epoch, config echo, history) of a checkpoint.
CheckpointInfo read_checkpoint_meta(const fs::path& path);

}  // namespace fsts
