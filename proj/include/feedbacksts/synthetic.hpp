#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "feedbacksts/sequence.hpp"

namespace fsts {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

/// Procedural scene description for desk-scale sequences: Gaussian point
/// targets drifting over value-noise clutter.
struct SyntheticSceneSpec {
  int height = 64;
  int width = 64;
  int num_targets = 2;
  double radius_min = 1.0;  // half-maximum radius in px
  double radius_max = 3.0;
  double target_contrast = 1.5;  // peak amplitude as a multiple of local background
  std::vector<Vec2> velocities;  // px/frame, cycled over targets; empty -> random
  std::vector<Vec2> start_positions;  // (x, y); empty -> random
  double max_speed = 1.5;  // bound for random velocities
  double jitter_sigma = 0.0;
  double clutter_level = 0.25;
  Vec2 drift{0.2, 0.1};  // background drift in px/frame
  double noise_sigma = 0.01;
  double background_level = 0.3;
  uint64_t seed = 0;

  void validate() const;
};

FrameSequence generate_synthetic(const SyntheticSceneSpec& spec, int num_frames, const std::string& name = "synthetic");

void to_json(nlohmann::json& j, const SyntheticSceneSpec& s);
/// Strict: unknown keys raise ValidationError.
SyntheticSceneSpec synthetic_spec_from_json(const nlohmann::json& j);

}  // namespace fsts
