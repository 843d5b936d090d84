#include "feedbacksts/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "feedbacksts/config.hpp"
#include "feedbacksts/error.hpp"
#include "feedbacksts/image_io.hpp"
#include "feedbacksts/profiler.hpp"
#include "feedbacksts/synthetic.hpp"
#include "feedbacksts/training.hpp"

namespace fsts {

namespace {

using nlohmann::json;

struct Globals {
  std::string config_path;
  std::optional<uint64_t> seed;
  std::string device = "cpu";
  std::string run_dir;
};

RunConfig load_config(const Globals& g) {
  RunConfig c = g.config_path.empty() ? RunConfig{} : load_run_config(g.config_path);
  if (g.seed) {
    c.train.seed = *g.seed;
    c.data.synthetic.seed = *g.seed;
  }
  c.validate();
  return c;
}

torch::Device parse_device(const std::string& name) {
  std::optional<torch::Device> dev;
  try {
    dev.emplace(name);
  } catch (const c10::Error&) {
    throw ValidationError("unknown device '" + name + "' (expected cpu or cuda[:N])");
  }
  if (dev->is_cuda() && !torch::cuda::is_available())
    throw ValidationError("device '" + name + "' requested but CUDA is not available");
  return *dev;
}

fs::path run_root() {
  const char* env = std::getenv("FEEDBACKSTS_RUN_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

fs::path resolve_run_dir(const Globals& g, const std::string& command) {
  if (!g.run_dir.empty()) return g.run_dir;
  const std::time_t now = std::time(nullptr);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", std::localtime(&now));
  fs::path base = run_root() / (command + "-" + stamp);
  fs::path dir = base;
  for (int i = 1; fs::exists(dir); ++i) dir = base.string() + "-" + std::to_string(i);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool non_empty_dir(const fs::path& p) { return fs::is_directory(p) && !fs::is_empty(p); }

// ---- generate-data ---------------------------------------------------------

struct GenerateArgs {
  std::string out, spec;
  int num_sequences = -1, frames = -1;
  bool force = false;
};

int cmd_generate(const Globals& g, const GenerateArgs& a) {
  RunConfig cfg = load_config(g);
  SyntheticSceneSpec spec = cfg.data.synthetic;
  if (!a.spec.empty()) {
    try {
      spec = synthetic_spec_from_json(json::parse(read_text(a.spec)));
    } catch (const json::exception& e) {
      throw ValidationError("spec " + a.spec + " is not valid JSON: " + e.what());
    }
    if (g.seed) spec.seed = *g.seed;
  }
  const int n = a.num_sequences > 0 ? a.num_sequences : cfg.data.num_sequences;
  const int frames = a.frames > 0 ? a.frames : cfg.data.frames_per_sequence;
  const fs::path out = a.out;
  if (non_empty_dir(out)) {
    if (!a.force) throw ValidationError("output directory " + out.string() + " is not empty (pass --force to overwrite)");
    fs::remove_all(out);
  }
  fs::create_directories(out);
  for (int i = 0; i < n; ++i) {
    SyntheticSceneSpec s = spec;
    s.seed = spec.seed + static_cast<uint64_t>(i);
    char name[32];
    std::snprintf(name, sizeof(name), "seq_%03d", i);
    write_sequence(out / name, generate_synthetic(s, frames, name));
  }
  json spec_json;
  to_json(spec_json, spec);
  write_text(out / "generation.json",
             json{{"num_sequences", n}, {"frames_per_sequence", frames}, {"spec", spec_json}}.dump(2) + "\n");
  std::cout << "wrote " << n << " sequences x " << frames << " frames to " << out.string() << "\n";
  return 0;
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
  std::string data, resume;
  int epochs = -1;
};

std::vector<EpochStats> train_once(const RunConfig& cfg, const std::vector<FrameSequence>& data, const fs::path& dir,
                                   const torch::Device& device, const std::string& resume) {
  FeedbackNet net = make_network(cfg.model, cfg.train.seed);
  net->to(device);
  Trainer trainer(net, cfg.train, to_json(cfg));
  if (!resume.empty()) {
    trainer.resume(resume);
    std::cout << "resumed from epoch " << trainer.completed_epochs() << ", continuing at lr "
              << lr_at(trainer.completed_epochs() + 1, cfg.train) << "\n";
  }
  trainer.on_epoch = [](const EpochStats& s) {
    std::printf("epoch %d  lr %.4g  loss %.6f  train_miou %.4f\n", s.epoch, s.lr, s.loss, s.train_miou);
    std::fflush(stdout);
  };
  return trainer.fit(data, dir);
}

int cmd_train(const Globals& g, const TrainArgs& a, const std::string& command = "train") {
  RunConfig cfg = load_config(g);
  if (a.epochs > 0) cfg.train.epochs = a.epochs;
  const torch::Device device = parse_device(g.device);
  const auto data = load_dataset(a.data, Split::Train);
  if (data.empty()) throw ValidationError("no sequences found under " + a.data);
  const fs::path dir = resolve_run_dir(g, command);
  fs::create_directories(dir);
  save_run_config(dir / "config.json", cfg);
  std::cout << "run directory: " << dir.string() << "\n";

  std::vector<EpochStats> history;
  try {
    history = train_once(cfg, data, dir, device, a.resume);
  } catch (const DivergenceError& e) {
    if (cfg.train.grad_clip > 0.0) throw;
    std::cerr << "training diverged: " << e.what() << "\nrestarting once with gradient clipping (norm 1.0)\n";
    if (fs::exists(dir / "train_log.csv")) fs::rename(dir / "train_log.csv", dir / "train_log.diverged.csv");
    cfg.train.grad_clip = 1.0;
    save_run_config(dir / "config.json", cfg);
    history = train_once(cfg, data, dir, device, "");
  }
  json h = json::array();
  for (const auto& s : history) h.push_back(to_json(s));
  write_text(dir / "history.json", h.dump(2) + "\n");
  return 0;
}

// ---- infer -----------------------------------------------------------------

struct InferArgs {
  std::string checkpoint, input, out;
  int window = -1;
  std::vector<std::string> dump;
};

struct LoadedModel {
  RunConfig cfg;
  FeedbackNet net{nullptr};
};

LoadedModel load_model(const fs::path& ckpt, const torch::Device& device) {
  LoadedModel m;
  m.cfg = run_config_from_json(read_checkpoint_meta(ckpt).config);
  m.net = FeedbackNet(m.cfg.model);
  Trainer::load_checkpoint(ckpt, m.net, nullptr);
  m.net->to(device);
  return m;
}

int cmd_infer(const Globals& g, const InferArgs& a) {
  const torch::Device device = parse_device(g.device);
  LoadedModel m = load_model(a.checkpoint, device);
  const int window = a.window > 0 ? a.window : m.cfg.train.window_length;
  m.net->set_capture({a.dump.begin(), a.dump.end()});
  const FrameSequence seq = load_sequence(a.input, false);
  const fs::path out = a.out.empty() ? resolve_run_dir(g, "infer") : fs::path(a.out);
  fs::create_directories(out);

  auto hook = [&](const SlidingWindow& win, FeedbackNet& net) {
    for (const auto& [layer, t] : net->captured())
      dump_feature_volume(out / layer, t, win.start, win.real_frames);
  };
  const auto scores = predict_sequence(m.net, seq, window, hook);
  for (size_t i = 0; i < scores.size(); ++i) write_gray16(out / "scores" / frame_filename(static_cast<int>(i)), scores[i]);
  std::cout << "wrote " << scores.size() << " score maps to " << (out / "scores").string() << "\n";
  return 0;
}

// ---- evaluate --------------------------------------------------------------

struct EvaluateArgs {
  std::string pred, gt, out;
  std::optional<double> threshold;
  bool roc = false;
};

void collect_pair(const fs::path& pred_dir, const fs::path& mask_dir, std::vector<FloatPlane>& scores,
                  std::vector<MaskPlane>& masks) {
  const fs::path p = fs::is_directory(pred_dir / "scores") ? pred_dir / "scores" : pred_dir;
  const auto pf = list_images(p);
  const auto mf = list_images(mask_dir);
  if (pf.size() != mf.size())
    throw ValidationError("frame count mismatch: " + std::to_string(pf.size()) + " prediction frames in " + p.string() +
                          " vs " + std::to_string(mf.size()) + " ground-truth frames in " + mask_dir.string());
  for (size_t i = 0; i < pf.size(); ++i) {
    scores.push_back(read_gray(pf[i]));
    masks.push_back(read_mask(mf[i]));
    if (!scores.back().same_shape(masks.back()))
      throw ValidationError("size mismatch between " + pf[i].string() + " and " + mf[i].string());
  }
}

int cmd_evaluate(const Globals& g, const EvaluateArgs& a) {
  RunConfig cfg = load_config(g);
  const double threshold = a.threshold.value_or(cfg.eval.threshold);
  if (threshold < 0.0 || threshold > 1.0) throw ValidationError("--threshold must lie in [0,1]");
  const fs::path gt = a.gt, pred = a.pred;
  if (!fs::is_directory(gt)) throw ValidationError("ground-truth path " + gt.string() + " is not a directory");
  if (!fs::is_directory(pred)) throw ValidationError("prediction path " + pred.string() + " is not a directory");

  std::vector<FloatPlane> scores;
  std::vector<MaskPlane> masks;
  if (fs::is_directory(gt / "masks")) {
    collect_pair(pred, gt / "masks", scores, masks);
  } else if (!list_images(gt).empty()) {
    collect_pair(pred, gt, scores, masks);
  } else {
    std::vector<fs::path> seqs;
    for (const auto& e : fs::directory_iterator(gt))
      if (e.is_directory() && fs::is_directory(e.path() / "masks")) seqs.push_back(e.path());
    std::sort(seqs.begin(), seqs.end());
    if (seqs.empty()) throw ValidationError("no masks found under " + gt.string());
    for (const auto& s : seqs) collect_pair(pred / s.filename(), s / "masks", scores, masks);
  }

  MetricReport report = evaluate_frames(scores, masks, threshold, cfg.eval.match_radius);
  const fs::path out = a.out.empty() ? resolve_run_dir(g, "evaluate") : fs::path(a.out);
  fs::create_directories(out);
  if (a.roc) {
    const RocCurve curve = roc_auc(scores, masks, default_thresholds(cfg.eval.roc_thresholds), cfg.eval.match_radius);
    report.auc = curve.auc;
    write_text(out / "roc.csv", roc_csv(curve));
    const RocCurve stored = parse_roc_csv(read_text(out / "roc.csv"));
    render_roc_plot(stored, out / "roc.png", "ROC");
  }
  write_text(out / "metrics.json", report.to_json().dump(2) + "\n");
  write_text(out / "metrics.csv", MetricReport::csv_header() + "\n" + report.csv_row() + "\n");
  std::cout << report.to_json().dump(2) << "\n";
  return 0;
}

// ---- profile ---------------------------------------------------------------

struct ProfileArgs {
  std::vector<int64_t> shape{11, 256, 256};
  bool sweep_t = false, sweep_d = false, layers = false;
  int fps_runs = 0;
};

int cmd_profile(const Globals& g, const ProfileArgs& a) {
  RunConfig cfg = load_config(g);
  const torch::Device device = parse_device(g.device);
  if (a.shape.size() != 3) throw ValidationError("--input-shape takes D H W");
  std::vector<std::pair<int64_t, int64_t>> runs;  // (T, D)
  if (a.sweep_t) {
    for (int64_t t = 1; t <= 4; ++t) runs.push_back({t, a.shape[0]});
  } else if (a.sweep_d) {
    for (int64_t d = 5; d <= 15; d += 2) runs.push_back({cfg.model.interval, d});
  } else {
    runs.push_back({cfg.model.interval, a.shape[0]});
  }
  FeedbackNet net = make_network(cfg.model, cfg.train.seed);
  std::string csv = ProfileReport::csv_header() + "\n";
  json reports = json::array();
  std::cout << ProfileReport::csv_header() << "\n";
  for (const auto& [t, d] : runs) {
    net->set_interval(t);
    const ProfileReport r = profile_network(net, d, a.shape[1], a.shape[2], a.fps_runs, device);
    std::cout << r.csv_row() << "\n";
    csv += r.csv_row() + "\n";
    reports.push_back(r.to_json());
  }
  const fs::path out = resolve_run_dir(g, "profile");
  write_text(out / "profile.csv", csv);
  write_text(out / "profile.json", reports.dump(2) + "\n");
  if (a.layers) {
    std::string lines = "layer,flops\n";
    const CostLedger ledger = flops_ledger(net, runs.back().second, a.shape[1], a.shape[2]);
    for (const auto& e : ledger.entries())
      lines += e.layer + "," + std::to_string(static_cast<long long>(e.flops)) + "\n";
    write_text(out / "profile_layers.csv", lines);
  }
  return 0;
}

// ---- ablate ----------------------------------------------------------------

struct AblateArgs {
  std::vector<std::string> variants;
  std::string data;
  int epochs = 3;
  std::vector<int64_t> shape{5, 256, 256};
};

int cmd_ablate(const Globals& g, const AblateArgs& a) {
  RunConfig cfg = load_config(g);
  if (a.shape.size() != 3) throw ValidationError("--input-shape takes D H W");
  std::vector<std::string> names = a.variants;
  if (names.empty())
    for (const auto& v : VariantSpec::all()) names.push_back(v.name);
  for (const auto& n : names) VariantSpec::parse(n);  // fail before any work

  const fs::path dir = resolve_run_dir(g, "ablate");
  fs::create_directories(dir);
  std::string csv = "variant,encoder,decoder,params,flops";
  csv += a.data.empty() ? "\n" : ",final_loss,final_train_miou\n";
  for (const auto& n : names) {
    RunConfig c = cfg;
    c.model.variant = n;
    const VariantSpec v = VariantSpec::parse(n);
    FeedbackNet net = make_network(c.model, c.train.seed);
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s,%s,%s,%lld,%.6f", n.c_str(), v.encoder.c_str(), v.decoder.c_str(),
                  static_cast<long long>(count_params(*net)), count_flops(net, a.shape[0], a.shape[1], a.shape[2]));
    csv += buf;
    if (!a.data.empty()) {
      Globals sub = g;
      sub.run_dir = (dir / n).string();
      RunConfig tc = c;
      tc.train.epochs = a.epochs;
      save_run_config(dir / (n + ".config.json"), tc);
      sub.config_path = (dir / (n + ".config.json")).string();
      sub.seed.reset();
      cmd_train(sub, TrainArgs{a.data, "", a.epochs});
      const json h = json::parse(read_text(dir / n / "history.json"));
      std::snprintf(buf, sizeof(buf), ",%.6f,%.6f", h.back().at("loss").get<double>(),
                    h.back().at("train_miou").get<double>());
      csv += buf;
    }
    csv += "\n";
  }
  write_text(dir / "ablation.csv", csv);
  std::cout << csv;
  return 0;
}

// ---- roc-plot --------------------------------------------------------------

struct RocPlotArgs {
  std::string csv, out, title = "ROC";
};

int cmd_roc_plot(const RocPlotArgs& a) {
  const RocCurve curve = parse_roc_csv(read_text(a.csv));
  render_roc_plot(curve, a.out, a.title);
  std::cout << "wrote " << a.out << " (auc " << curve.auc << ")\n";
  return 0;
}

}  // namespace

void render_roc_plot(const RocCurve& curve, const fs::path& out_png, const std::string& title) {
  constexpr int kW = 640, kH = 480, kL = 70, kR = 20, kT = 40, kB = 60;
  cv::Mat img(kH, kW, CV_8UC3, cv::Scalar(255, 255, 255));
  double max_fa = 0.0;
  for (const auto& p : curve.points) max_fa = std::max(max_fa, p.fa);
  const double x_scale = max_fa > 0.0 ? max_fa : 1.0;
  auto to_px = [&](double fa, double pd) {
    return cv::Point(kL + static_cast<int>(std::lround(fa / x_scale * (kW - kL - kR))),
                     kH - kB - static_cast<int>(std::lround(pd * (kH - kT - kB))));
  };
  for (int i = 0; i <= 5; ++i) {
    const double f = i / 5.0;
    cv::line(img, to_px(f * x_scale, 0), to_px(f * x_scale, 1), cv::Scalar(225, 225, 225), 1);
    cv::line(img, to_px(0, f), to_px(x_scale, f), cv::Scalar(225, 225, 225), 1);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2g", f * x_scale);
    cv::putText(img, buf, to_px(f * x_scale, 0) + cv::Point(-14, 20), cv::FONT_HERSHEY_SIMPLEX, 0.4, cv::Scalar(0, 0, 0));
    std::snprintf(buf, sizeof(buf), "%.1f", f);
    cv::putText(img, buf, to_px(0, f) + cv::Point(-32, 4), cv::FONT_HERSHEY_SIMPLEX, 0.4, cv::Scalar(0, 0, 0));
  }
  cv::rectangle(img, to_px(0, 1), to_px(x_scale, 0), cv::Scalar(0, 0, 0), 1);
  std::vector<cv::Point> pts{to_px(0, 0)};
  for (const auto& p : curve.points) pts.push_back(to_px(p.fa, p.pd));
  cv::polylines(img, pts, false, cv::Scalar(200, 80, 0), 2, cv::LINE_AA);
  char head[128];
  std::snprintf(head, sizeof(head), "%s  (AUC %.4f)", title.c_str(), curve.auc);
  cv::putText(img, head, cv::Point(kL, 26), cv::FONT_HERSHEY_SIMPLEX, 0.6, cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
  cv::putText(img, "Fa (false pixels / total)", cv::Point(kW / 2 - 90, kH - 18), cv::FONT_HERSHEY_SIMPLEX, 0.5,
              cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
  cv::putText(img, "Pd", cv::Point(12, kH / 2), cv::FONT_HERSHEY_SIMPLEX, 0.5, cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
  if (out_png.has_parent_path()) fs::create_directories(out_png.parent_path());
  if (!cv::imwrite(out_png.string(), img)) throw RuntimeFailure("cannot write plot " + out_png.string());
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Multi-frame infrared small target detection"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "Run config (JSON)");
  app.add_option("--seed", g.seed, "Seed for weights, data order and synthetic scenes");
  app.add_option("--device", g.device, "cpu or cuda[:N]");
  app.add_option("--run-dir", g.run_dir, "Output directory (default $FEEDBACKSTS_RUN_ROOT/<command>-<time>)");

  GenerateArgs ga;
  auto* gen = app.add_subcommand("generate-data", "Write synthetic sequences in the dataset layout");
  gen->add_option("--out", ga.out, "Dataset root to create")->required();
  gen->add_option("--spec", ga.spec, "Synthetic scene spec (JSON); default: config data.synthetic");
  gen->add_option("--num-sequences", ga.num_sequences);
  gen->add_option("--frames", ga.frames, "Frames per sequence");
  gen->add_flag("--force", ga.force, "Replace a non-empty output directory");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a network on a dataset root");
  train->add_option("--data", ta.data, "Dataset root (<root>/<seq>/images, masks)")->required();
  train->add_option("--resume", ta.resume, "Checkpoint to continue from");
  train->add_option("--epochs", ta.epochs, "Override train.epochs");

  InferArgs ia;
  auto* infer = app.add_subcommand("infer", "Score every frame of a sequence");
  infer->add_option("--checkpoint", ia.checkpoint)->required();
  infer->add_option("--input", ia.input, "Sequence directory with images/")->required();
  infer->add_option("--out", ia.out, "Output directory (default: run dir)");
  infer->add_option("--window", ia.window, "Sliding-window length (default: training window)");
  infer->add_option("--dump-features", ia.dump, "Layers to dump, comma separated")->delimiter(',');

  EvaluateArgs ea;
  auto* eval = app.add_subcommand("evaluate", "Score predictions against masks");
  eval->add_option("--pred", ea.pred, "Score maps (a directory, or one per sequence)")->required();
  eval->add_option("--gt", ea.gt, "Sequence directory, masks directory or dataset root")->required();
  eval->add_option("--threshold", ea.threshold);
  eval->add_option("--out", ea.out, "Output directory (default: run dir)");
  eval->add_flag("--roc", ea.roc, "Also write roc.csv and roc.png");

  ProfileArgs pa;
  auto* prof = app.add_subcommand("profile", "Parameter count and analytic FLOPs");
  prof->add_option("--input-shape", pa.shape, "D H W")->expected(3);
  prof->add_flag("--sweep-t", pa.sweep_t, "Profile T = 1..4");
  prof->add_flag("--sweep-d", pa.sweep_d, "Profile D = 5, 7, ..., 15");
  prof->add_flag("--layers", pa.layers, "Write per-layer FLOPs");
  prof->add_option("--fps", pa.fps_runs, "Timed forward passes (0 = skip)");

  AblateArgs aa;
  auto* abl = app.add_subcommand("ablate", "Compare backbone variants");
  abl->add_option("--variants", aa.variants, "Variant names, comma separated (default: all)")->delimiter(',');
  abl->add_option("--data", aa.data, "Dataset root; when set each variant is smoke-trained");
  abl->add_option("--epochs", aa.epochs, "Epochs per smoke training");
  abl->add_option("--input-shape", aa.shape, "D H W")->expected(3);

  RocPlotArgs ra;
  auto* plot = app.add_subcommand("roc-plot", "Render roc.csv to a PNG");
  plot->add_option("--csv", ra.csv)->required();
  plot->add_option("--out", ra.out)->required();
  plot->add_option("--title", ra.title);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_generate(g, ga);
    if (*train) return cmd_train(g, ta);
    if (*infer) return cmd_infer(g, ia);
    if (*eval) return cmd_evaluate(g, ea);
    if (*prof) return cmd_profile(g, pa);
    if (*abl) return cmd_ablate(g, aa);
    if (*plot) return cmd_roc_plot(ra);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const c10::Error& e) {
    std::cerr << "error: " << e.what_without_backtrace() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 2;
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.push_back("feedbacksts");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace fsts
