#include "feedbacksts/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace fsts {

namespace F = torch::nn::functional;

void TrainConfig::validate() const {
  if (!(lr0 > 0.0)) throw ValidationError("train.lr0 must be > 0");
  if (!(gamma > 0.0 && gamma < 1.0)) throw ValidationError("train.gamma must lie in (0,1)");
  for (size_t i = 1; i < milestones.size(); ++i)
    if (milestones[i] <= milestones[i - 1]) throw ValidationError("train.milestones must be strictly increasing");
  if (epochs < 1) throw ValidationError("train.epochs must be >= 1");
  if (batch_size < 1) throw ValidationError("train.batch_size must be >= 1");
  if (!(smooth_eps > 0.0)) throw ValidationError("train.smooth_eps must be > 0");
  if (window_length < 1) throw ValidationError("train.window_length must be >= 1");
  if (input_size < 16 || input_size % 16 != 0) throw ValidationError("train.input_size must be a positive multiple of 16");
  if (grad_clip < 0.0) throw ValidationError("train.grad_clip must be >= 0");
}

torch::Tensor soft_iou_loss(const torch::Tensor& pred, const torch::Tensor& target, double eps,
                            const torch::Tensor& frame_weight) {
  if (!pred.sizes().equals(target.sizes()))
    throw ValidationError("soft_iou_loss: prediction and target shapes differ");
  if (pred.dim() < 1 || pred.size(0) == 0) throw ValidationError("soft_iou_loss: empty input");
  torch::Tensor p = pred, g = target.to(pred.dtype());
  if (frame_weight.defined()) {
    if (pred.dim() != 5 || frame_weight.dim() != 2 || frame_weight.size(0) != pred.size(0) ||
        frame_weight.size(1) != pred.size(2))
      throw ValidationError("soft_iou_loss: frame weights must be [N, D] for [N, 1, D, H, W] inputs");
    torch::Tensor w = frame_weight.to(pred.dtype()).view({pred.size(0), 1, pred.size(2), 1, 1});
    p = p * w;
    g = g * w;
  }
  const int64_t n = pred.size(0);
  p = p.reshape({n, -1});
  g = g.reshape({n, -1});
  torch::Tensor inter = (p * g).sum(1);
  torch::Tensor uni = p.sum(1) + g.sum(1) - inter;
  return (1.0 - (inter + eps) / (uni + eps)).mean();
}

double lr_at(int epoch, const TrainConfig& cfg) {
  const auto passed = std::count_if(cfg.milestones.begin(), cfg.milestones.end(), [&](int m) { return m <= epoch; });
  return cfg.lr0 * std::pow(cfg.gamma, static_cast<double>(passed));
}

WindowSplitter training_splitter() { return &split_windows; }
WindowSplitter inference_splitter() { return &split_windows; }

FeedbackNet make_network(const NetworkConfig& config, uint64_t seed) {
  torch::manual_seed(seed);
  return FeedbackNet(config);
}

std::vector<FloatPlane> predict_sequence(FeedbackNet& net, const FrameSequence& seq, int window_length,
                                         const WindowHook& after_window) {
  if (seq.frame_count() == 0) throw ValidationError("predict: sequence '" + seq.name + "' has no frames");
  torch::NoGradGuard guard;
  net->eval();
  const torch::Device device = net->parameters().front().device();
  const int h = seq.height(), w = seq.width();
  const int ph = (16 - h % 16) % 16, pw = (16 - w % 16) % 16;
  std::vector<FloatPlane> scores(seq.frame_count());
  for (const auto& win : inference_splitter()(seq, window_length)) {
    WindowTensors t = to_tensors(materialize_window(win));
    torch::Tensor x = t.frames;  // [1, D, H, W]
    if (ph || pw) x = F::pad(x, F::PadFuncOptions({0, pw, 0, ph}).mode(torch::kReplicate));
    torch::Tensor y = net->forward(x.unsqueeze(1).to(device))[0][0].narrow(1, 0, h).narrow(2, 0, w);
    y = y.to(torch::kCPU).contiguous();
    if (after_window) after_window(win, net);
    auto acc = y.accessor<float, 3>();
    for (int pos = 0; pos < win.real_frames; ++pos) {
      FloatPlane plane(h, w);
      for (int yy = 0; yy < h; ++yy)
        for (int xx = 0; xx < w; ++xx) plane.at(yy, xx) = acc[pos][yy][xx];
      scores[win.start + pos] = std::move(plane);
    }
  }
  return scores;
}

nlohmann::json to_json(const EpochStats& s) {
  return {{"epoch", s.epoch}, {"lr", s.lr}, {"loss", s.loss}, {"train_miou", s.train_miou}, {"steps", s.steps}};
}

EpochStats epoch_stats_from_json(const nlohmann::json& j) {
  EpochStats s;
  s.epoch = j.at("epoch").get<int>();
  s.lr = j.at("lr").get<double>();
  s.loss = j.at("loss").get<double>();
  s.train_miou = j.at("train_miou").get<double>();
  s.steps = j.at("steps").get<int>();
  return s;
}

std::string checkpoint_name(int epoch) { return "ckpt_epoch_" + std::to_string(epoch) + ".pt"; }

Trainer::Trainer(FeedbackNet net, TrainConfig cfg, nlohmann::json config_echo)
    : net_(std::move(net)),
      cfg_(std::move(cfg)),
      config_echo_(std::move(config_echo)),
      optimizer_(net_->parameters(), torch::optim::AdamOptions(cfg_.lr0).betas({0.9, 0.999}).weight_decay(0.0)),
      rng_(cfg_.seed) {
  cfg_.validate();
}

namespace {

struct Batch {
  torch::Tensor frames;  // [B, 1, D, H, W]
  torch::Tensor masks;   // [B, 1, D, H, W]
  torch::Tensor valid;   // [B, D]
};

std::vector<SpatialOp> random_ops(std::mt19937_64& rng, bool square) {
  std::bernoulli_distribution coin(0.5);
  std::vector<SpatialOp> ops;
  if (coin(rng)) ops.push_back(SpatialOp::HFlip);
  if (coin(rng)) ops.push_back(SpatialOp::VFlip);
  if (coin(rng) && square) ops.push_back(SpatialOp::Transpose);
  return ops;
}

void set_lr(torch::optim::Adam& opt, double lr) {
  for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
}

}  // namespace

EpochStats Trainer::run_epoch(int epoch, const std::vector<FrameSequence>& data, const std::optional<fs::path>& run_dir) {
  const double lr = lr_at(epoch, cfg_);
  set_lr(optimizer_, lr);
  net_->train();

  std::vector<SlidingWindow> windows;
  for (const auto& seq : data) {
    auto w = training_splitter()(seq, cfg_.window_length);
    windows.insert(windows.end(), w.begin(), w.end());
  }
  std::shuffle(windows.begin(), windows.end(), rng_);

  std::ofstream log;
  if (run_dir) {
    const fs::path p = *run_dir / "train_log.csv";
    const bool fresh = !fs::exists(p);
    log.open(p, std::ios::app);
    if (!log) throw RuntimeFailure("cannot open training log " + p.string());
    if (fresh) log << "epoch,step,lr,loss\n";
  }

  EpochStats stats;
  stats.epoch = epoch;
  stats.lr = lr;
  double loss_sum = 0.0;
  int64_t tp = 0, fp = 0, fn = 0;
  int batch_id = 0;
  for (size_t b0 = 0; b0 < windows.size(); b0 += cfg_.batch_size, ++batch_id) {
    std::vector<torch::Tensor> fr, ms, va;
    for (size_t i = b0; i < std::min(windows.size(), b0 + cfg_.batch_size); ++i) {
      WindowData wd = materialize_window(windows[i]);
      if (cfg_.augment) augment(wd, random_ops(rng_, wd.frames.front().height == wd.frames.front().width));
      WindowTensors t = to_tensors(prepare_input(wd, cfg_.prepare, cfg_.input_size, rng_));
      fr.push_back(t.frames);
      ms.push_back(t.masks);
      va.push_back(t.valid);
    }
    const torch::Device device = net_->parameters().front().device();
    Batch batch{torch::stack(fr).to(device), torch::stack(ms).to(device), torch::stack(va).to(device)};

    optimizer_.zero_grad();
    torch::Tensor pred;
    try {
      pred = net_->forward(batch.frames);
    } catch (const NonFiniteError& e) {
      throw DivergenceError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", batch " +
                                std::to_string(batch_id) + ", lr " + std::to_string(lr) + ")",
                            epoch, batch_id, lr);
    }
    torch::Tensor loss = soft_iou_loss(pred, batch.masks, cfg_.smooth_eps, batch.valid);
    const double lv = loss.item<double>();
    if (!std::isfinite(lv)) {
      char buf[160];
      std::snprintf(buf, sizeof(buf), "loss became non-finite at epoch %d, batch %d (lr %.6g)", epoch, batch_id, lr);
      throw DivergenceError(buf, epoch, batch_id, lr);
    }
    loss.backward();
    if (cfg_.grad_clip > 0.0) torch::nn::utils::clip_grad_norm_(net_->parameters(), cfg_.grad_clip);
    optimizer_.step();

    {
      torch::NoGradGuard g;
      torch::Tensor v = batch.valid.view({batch.valid.size(0), 1, batch.valid.size(1), 1, 1}) > 0.5;
      torch::Tensor pb = (pred > 0.5).logical_and(v), gb = (batch.masks > 0.5).logical_and(v);
      tp += pb.logical_and(gb).sum().item<int64_t>();
      fp += pb.logical_and(gb.logical_not()).sum().item<int64_t>();
      fn += gb.logical_and(pb.logical_not()).sum().item<int64_t>();
    }
    loss_sum += lv;
    ++stats.steps;
    ++global_step_;
    if (log) {
      char buf[128];
      std::snprintf(buf, sizeof(buf), "%d,%lld,%.9g,%.9g\n", epoch, static_cast<long long>(global_step_), lr, lv);
      log << buf;
    }
  }
  stats.loss = stats.steps ? loss_sum / stats.steps : 0.0;
  stats.train_miou = (tp + fp + fn) == 0 ? 1.0 : static_cast<double>(tp) / (tp + fp + fn);
  return stats;
}

std::vector<EpochStats> Trainer::fit(const std::vector<FrameSequence>& data, const std::optional<fs::path>& run_dir) {
  if (data.empty()) throw ValidationError("training dataset is empty");
  for (const auto& seq : data) {
    if (!seq.has_masks()) throw ValidationError("training sequence '" + seq.name + "' has no masks");
    seq.validate();
  }
  if (run_dir) fs::create_directories(*run_dir);
  for (int epoch = completed_ + 1; epoch <= cfg_.epochs; ++epoch) {
    EpochStats s = run_epoch(epoch, data, run_dir);
    history_.push_back(s);
    completed_ = epoch;
    if (run_dir) save_checkpoint(*run_dir / checkpoint_name(epoch), epoch);
    if (on_epoch) on_epoch(s);
  }
  return history_;
}

void Trainer::save_checkpoint(const fs::path& path, int epoch) const {
  torch::serialize::OutputArchive archive;
  net_->save(archive);
  torch::serialize::OutputArchive opt;
  optimizer_.save(opt);
  archive.write("optimizer", opt);
  nlohmann::json meta{{"epoch", epoch}, {"config", config_echo_}, {"global_step", global_step_}};
  meta["history"] = nlohmann::json::array();
  for (const auto& h : history_) meta["history"].push_back(to_json(h));
  std::ostringstream rng;
  rng << rng_;
  meta["rng_state"] = rng.str();
  archive.write("meta", c10::IValue(meta.dump()));

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  archive.save_to(tmp.string());
  fs::rename(tmp, path);
}

namespace {

CheckpointInfo parse_meta(torch::serialize::InputArchive& archive) {
  c10::IValue meta_value;
  archive.read("meta", meta_value);
  const auto meta = nlohmann::json::parse(meta_value.toStringRef());
  CheckpointInfo info;
  info.epoch = meta.at("epoch").get<int>();
  info.config = meta.at("config");
  info.global_step = meta.value("global_step", int64_t{0});
  info.rng_state = meta.value("rng_state", std::string());
  for (const auto& h : meta.at("history")) info.history.push_back(epoch_stats_from_json(h));
  return info;
}

void open_archive(torch::serialize::InputArchive& archive, const fs::path& path) {
  if (!fs::exists(path)) throw ValidationError("checkpoint " + path.string() + " does not exist");
  try {
    archive.load_from(path.string());
  } catch (const c10::Error& e) {
    throw RuntimeFailure("cannot read checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
}

}  // namespace

CheckpointInfo read_checkpoint_meta(const fs::path& path) {
  torch::serialize::InputArchive archive;
  open_archive(archive, path);
  try {
    return parse_meta(archive);
  } catch (const std::exception& e) {
    throw RuntimeFailure("checkpoint " + path.string() + " has no readable metadata: " + e.what());
  }
}

CheckpointInfo Trainer::load_checkpoint(const fs::path& path, FeedbackNet& net, torch::optim::Adam* optimizer) {
  torch::serialize::InputArchive archive;
  open_archive(archive, path);
  try {
    net->load(archive);
    if (optimizer) {
      torch::serialize::InputArchive opt;
      archive.read("optimizer", opt);
      optimizer->load(opt);
    }
    return parse_meta(archive);
  } catch (const c10::Error& e) {
    throw RuntimeFailure("checkpoint " + path.string() + " does not match this network: " +
                         e.what_without_backtrace());
  }
}

void Trainer::resume(const fs::path& path) {
  CheckpointInfo info = load_checkpoint(path, net_, &optimizer_);
  completed_ = info.epoch;
  history_ = info.history;
  global_step_ = info.global_step;
  if (!info.rng_state.empty()) {
    std::istringstream in(info.rng_state);
    in >> rng_;
  }
}

}  // namespace fsts
