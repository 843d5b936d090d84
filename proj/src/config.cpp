#include "feedbacksts/config.hpp"

#include <fstream>
#include <set>

#include "feedbacksts/error.hpp"

namespace fsts {

namespace {

using nlohmann::json;

void reject_unknown(const json& j, const std::string& where, const std::set<std::string>& keys) {
  if (!j.is_object()) throw ValidationError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!keys.count(it.key())) throw ValidationError("unknown key '" + it.key() + "' in " + where);
}

template <typename T>
void take(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

void EvalConfig::validate() const {
  if (threshold < 0.0 || threshold > 1.0) throw ValidationError("eval.threshold must lie in [0,1]");
  if (!(match_radius >= 0.0)) throw ValidationError("eval.match_radius must be >= 0");
  if (roc_thresholds < 2) throw ValidationError("eval.roc_thresholds must be >= 2");
}

void RunConfig::validate() const {
  if (data.num_sequences < 1) throw ValidationError("data.num_sequences must be >= 1");
  if (data.frames_per_sequence < 1) throw ValidationError("data.frames_per_sequence must be >= 1");
  data.synthetic.validate();
  model.validate();
  train.validate();
  eval.validate();
}

RunConfig run_config_from_json(const json& j) {
  reject_unknown(j, "config", {"data", "model", "train", "eval"});
  RunConfig c;
  try {
    if (j.contains("data")) {
      const json& d = j["data"];
      reject_unknown(d, "data",
                     {"window_length", "input_size", "prepare", "augment", "num_sequences", "frames_per_sequence",
                      "synthetic"});
      take(d, "window_length", c.train.window_length);
      take(d, "input_size", c.train.input_size);
      take(d, "augment", c.train.augment);
      take(d, "num_sequences", c.data.num_sequences);
      take(d, "frames_per_sequence", c.data.frames_per_sequence);
      if (d.contains("prepare")) c.train.prepare = parse_prepare_mode(d["prepare"].get<std::string>());
      if (d.contains("synthetic")) c.data.synthetic = synthetic_spec_from_json(d["synthetic"]);
    }
    if (j.contains("model")) {
      const json& m = j["model"];
      reject_unknown(m, "model",
                     {"variant", "channels", "in_channels", "interval", "pyramid_levels", "head_prior",
                      "check_finite"});
      take(m, "variant", c.model.variant);
      take(m, "channels", c.model.channels);
      take(m, "in_channels", c.model.in_channels);
      take(m, "interval", c.model.interval);
      take(m, "pyramid_levels", c.model.pyramid_levels);
      take(m, "head_prior", c.model.head_prior);
      take(m, "check_finite", c.model.check_finite);
    }
    if (j.contains("train")) {
      const json& t = j["train"];
      reject_unknown(t, "train",
                     {"lr0", "milestones", "gamma", "epochs", "batch_size", "seed", "smooth_eps", "grad_clip"});
      take(t, "lr0", c.train.lr0);
      take(t, "milestones", c.train.milestones);
      take(t, "gamma", c.train.gamma);
      take(t, "epochs", c.train.epochs);
      take(t, "batch_size", c.train.batch_size);
      take(t, "seed", c.train.seed);
      take(t, "smooth_eps", c.train.smooth_eps);
      take(t, "grad_clip", c.train.grad_clip);
    }
    if (j.contains("eval")) {
      const json& e = j["eval"];
      reject_unknown(e, "eval", {"threshold", "match_radius", "roc_thresholds"});
      take(e, "threshold", c.eval.threshold);
      take(e, "match_radius", c.eval.match_radius);
      take(e, "roc_thresholds", c.eval.roc_thresholds);
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

json to_json(const RunConfig& c) {
  json synth;
  to_json(synth, c.data.synthetic);
  return json{{"data",
               {{"window_length", c.train.window_length},
                {"input_size", c.train.input_size},
                {"prepare", to_string(c.train.prepare)},
                {"augment", c.train.augment},
                {"num_sequences", c.data.num_sequences},
                {"frames_per_sequence", c.data.frames_per_sequence},
                {"synthetic", synth}}},
              {"model",
               {{"variant", c.model.variant},
                {"channels", c.model.channels},
                {"in_channels", c.model.in_channels},
                {"interval", c.model.interval},
                {"pyramid_levels", c.model.pyramid_levels},
                {"head_prior", c.model.head_prior},
                {"check_finite", c.model.check_finite}}},
              {"train",
               {{"lr0", c.train.lr0},
                {"milestones", c.train.milestones},
                {"gamma", c.train.gamma},
                {"epochs", c.train.epochs},
                {"batch_size", c.train.batch_size},
                {"seed", c.train.seed},
                {"smooth_eps", c.train.smooth_eps},
                {"grad_clip", c.train.grad_clip}}},
              {"eval",
               {{"threshold", c.eval.threshold},
                {"match_radius", c.eval.match_radius},
                {"roc_thresholds", c.eval.roc_thresholds}}}};
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

void save_run_config(const std::filesystem::path& path, const RunConfig& c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write config " + path.string());
  out << to_json(c).dump(2) << "\n";
}

}  // namespace fsts
