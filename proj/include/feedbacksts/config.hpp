#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "feedbacksts/backbone.hpp"
#include "feedbacksts/synthetic.hpp"
#include "feedbacksts/training.hpp"

namespace fsts {

struct DataConfig {
  int num_sequences = 2;
  int frames_per_sequence = 33;
  SyntheticSceneSpec synthetic;
};

struct EvalConfig {
  double threshold = 0.5;
  double match_radius = 3.0;
  int roc_thresholds = 201;

  void validate() const;
};

/// Complete run description. `train` carries the windowing/cropping fields
/// that live under "data" in the JSON document.
struct RunConfig {
  DataConfig data;
  NetworkConfig model;
  TrainConfig train;
  EvalConfig eval;

  void validate() const;
};

/// Strict parse: unknown sections or keys raise ValidationError; missing keys keep defaults.
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& c);

RunConfig load_run_config(const std::filesystem::path& path);
/// Writes the fully materialised config as pretty JSON.
void save_run_config(const std::filesystem::path& path, const RunConfig& c);

}  // namespace fsts
