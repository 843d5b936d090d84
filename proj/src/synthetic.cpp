#include "feedbacksts/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <set>

#include "feedbacksts/error.hpp"

namespace fsts {

namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double lattice(uint64_t seed, int64_t ix, int64_t iy, int octave) {
  uint64_t h = splitmix64(seed ^ splitmix64(static_cast<uint64_t>(ix) * 0x632be59bd9b4e019ULL ^
                                            static_cast<uint64_t>(iy) * 0x85157af5ULL ^
                                            static_cast<uint64_t>(octave) << 56));
  return static_cast<double>(h >> 11) * (1.0 / 9007199254740992.0);
}

double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

// Three octaves of value noise in [0,1].
double value_noise(uint64_t seed, double x, double y) {
  constexpr double kScales[] = {16.0, 8.0, 4.0};
  constexpr double kWeights[] = {0.5714285714285714, 0.2857142857142857, 0.14285714285714285};
  double acc = 0.0;
  for (int o = 0; o < 3; ++o) {
    double fx = x / kScales[o], fy = y / kScales[o];
    double x0 = std::floor(fx), y0 = std::floor(fy);
    double tx = smooth(fx - x0), ty = smooth(fy - y0);
    auto ix = static_cast<int64_t>(x0), iy = static_cast<int64_t>(y0);
    double a = lattice(seed, ix, iy, o), b = lattice(seed, ix + 1, iy, o);
    double c = lattice(seed, ix, iy + 1, o), d = lattice(seed, ix + 1, iy + 1, o);
    acc += kWeights[o] * ((1 - ty) * ((1 - tx) * a + tx * b) + ty * ((1 - tx) * c + tx * d));
  }
  return acc;
}

struct Target {
  Vec2 start;
  Vec2 velocity;
  double radius;
  double sigma;
};

bool inside(const SyntheticSceneSpec& s, Vec2 p) {
  return p.x >= 0.0 && p.y >= 0.0 && p.x <= s.width - 1 && p.y <= s.height - 1;
}

}  // namespace

void SyntheticSceneSpec::validate() const {
  if (height < 1 || width < 1) throw ValidationError("synthetic: image size must be positive");
  if (num_targets < 0) throw ValidationError("synthetic: num_targets must be >= 0");
  // A half-maximum disc of radius >= sqrt(2)/2 always covers the nearest pixel centre.
  if (!(radius_min >= 0.75) || radius_max < radius_min)
    throw ValidationError("synthetic: need 0.75 <= radius_min <= radius_max");
  if (!(target_contrast > 0.0)) throw ValidationError("synthetic: target_contrast must be > 0");
  if (jitter_sigma < 0.0 || noise_sigma < 0.0 || clutter_level < 0.0 || max_speed < 0.0)
    throw ValidationError("synthetic: sigmas, clutter_level and max_speed must be >= 0");
}

FrameSequence generate_synthetic(const SyntheticSceneSpec& spec, int num_frames, const std::string& name) {
  spec.validate();
  if (num_frames < 1) throw ValidationError("synthetic: num_frames must be >= 1");

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  std::vector<Target> targets;
  bool any_inside = false;
  for (int i = 0; i < spec.num_targets; ++i) {
    Target t;
    t.radius = spec.radius_min + (spec.radius_max - spec.radius_min) * unit(rng);
    t.sigma = t.radius / std::sqrt(2.0 * std::numbers::ln2);
    if (i < static_cast<int>(spec.start_positions.size())) {
      t.start = spec.start_positions[i];
    } else {
      const double m = std::min(4.0, 0.25 * std::min(spec.width, spec.height));
      t.start = {m + (spec.width - 1 - 2 * m) * unit(rng), m + (spec.height - 1 - 2 * m) * unit(rng)};
    }
    if (!spec.velocities.empty()) {
      t.velocity = spec.velocities[i % spec.velocities.size()];
    } else {
      double ang = 2.0 * std::numbers::pi * unit(rng);
      double speed = spec.max_speed * unit(rng);
      t.velocity = {speed * std::cos(ang), speed * std::sin(ang)};
    }
    any_inside = any_inside || inside(spec, t.start);
    targets.push_back(t);
  }
  if (spec.num_targets > 0 && !any_inside)
    throw ValidationError("synthetic: all initial target positions lie outside the image");

  const uint64_t noise_seed = splitmix64(spec.seed ^ 0x5eedULL);
  FrameSequence seq;
  seq.name = name;
  for (int f = 0; f < num_frames; ++f) {
    FloatPlane bg(spec.height, spec.width);
    const double ox = spec.drift.x * f, oy = spec.drift.y * f;
    for (int y = 0; y < spec.height; ++y)
      for (int x = 0; x < spec.width; ++x)
        bg.at(y, x) = static_cast<float>(spec.background_level +
                                         2.0 * spec.clutter_level * (value_noise(noise_seed, x + ox, y + oy) - 0.5));

    std::vector<double> signal(static_cast<size_t>(spec.height) * spec.width, 0.0);
    MaskPlane mask(spec.height, spec.width, 0);
    for (const auto& t : targets) {
      Vec2 p{t.start.x + t.velocity.x * f, t.start.y + t.velocity.y * f};
      if (spec.jitter_sigma > 0.0) {
        p.x += spec.jitter_sigma * gauss(rng);
        p.y += spec.jitter_sigma * gauss(rng);
      }
      if (!inside(spec, p)) continue;
      const int cx = static_cast<int>(std::lround(p.x)), cy = static_cast<int>(std::lround(p.y));
      const double local = std::clamp(static_cast<double>(bg.at(cy, cx)), 0.05, 1.0);
      const double amp = spec.target_contrast * local;
      const int reach = static_cast<int>(std::ceil(4.0 * t.sigma));
      for (int y = std::max(0, cy - reach); y <= std::min(spec.height - 1, cy + reach); ++y) {
        for (int x = std::max(0, cx - reach); x <= std::min(spec.width - 1, cx + reach); ++x) {
          const double r2 = (x - p.x) * (x - p.x) + (y - p.y) * (y - p.y);
          const double g = std::exp(-r2 / (2.0 * t.sigma * t.sigma));
          signal[static_cast<size_t>(y) * spec.width + x] += amp * g;
          if (g > 0.5) mask.at(y, x) = 1;
        }
      }
    }

    FloatPlane frame(spec.height, spec.width);
    for (int y = 0; y < spec.height; ++y) {
      for (int x = 0; x < spec.width; ++x) {
        double v = bg.at(y, x) + signal[static_cast<size_t>(y) * spec.width + x];
        if (spec.noise_sigma > 0.0) v += spec.noise_sigma * gauss(rng);
        frame.at(y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
    seq.frames.push_back(std::move(frame));
    seq.masks.push_back(std::move(mask));
  }
  return seq;
}

void to_json(nlohmann::json& j, const SyntheticSceneSpec& s) {
  auto vecs = [](const std::vector<Vec2>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& p : v) a.push_back({p.x, p.y});
    return a;
  };
  j = nlohmann::json{{"height", s.height},
                     {"width", s.width},
                     {"num_targets", s.num_targets},
                     {"radius_min", s.radius_min},
                     {"radius_max", s.radius_max},
                     {"target_contrast", s.target_contrast},
                     {"velocities", vecs(s.velocities)},
                     {"start_positions", vecs(s.start_positions)},
                     {"max_speed", s.max_speed},
                     {"jitter_sigma", s.jitter_sigma},
                     {"clutter_level", s.clutter_level},
                     {"drift", {s.drift.x, s.drift.y}},
                     {"noise_sigma", s.noise_sigma},
                     {"background_level", s.background_level},
                     {"seed", s.seed}};
}

SyntheticSceneSpec synthetic_spec_from_json(const nlohmann::json& j) {
  static const std::set<std::string> kKeys = {
      "height",     "width",        "num_targets",   "radius_min", "radius_max",  "target_contrast",  "velocities",
      "start_positions", "max_speed", "jitter_sigma", "clutter_level", "drift", "noise_sigma", "background_level",
      "seed"};
  if (!j.is_object()) throw ValidationError("synthetic spec must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!kKeys.count(it.key())) throw ValidationError("synthetic spec: unknown key '" + it.key() + "'");

  auto vec2 = [](const nlohmann::json& v) {
    if (!v.is_array() || v.size() != 2) throw ValidationError("synthetic spec: expected [x, y] pair");
    return Vec2{v[0].get<double>(), v[1].get<double>()};
  };
  SyntheticSceneSpec s;
  try {
    s.height = j.value("height", s.height);
    s.width = j.value("width", s.width);
    s.num_targets = j.value("num_targets", s.num_targets);
    s.radius_min = j.value("radius_min", s.radius_min);
    s.radius_max = j.value("radius_max", s.radius_max);
    s.target_contrast = j.value("target_contrast", s.target_contrast);
    s.max_speed = j.value("max_speed", s.max_speed);
    s.jitter_sigma = j.value("jitter_sigma", s.jitter_sigma);
    s.clutter_level = j.value("clutter_level", s.clutter_level);
    s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
    s.background_level = j.value("background_level", s.background_level);
    s.seed = j.value("seed", s.seed);
    if (j.contains("drift")) s.drift = vec2(j["drift"]);
    if (j.contains("velocities"))
      for (const auto& v : j["velocities"]) s.velocities.push_back(vec2(v));
    if (j.contains("start_positions"))
      for (const auto& v : j["start_positions"]) s.start_positions.push_back(vec2(v));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("synthetic spec: ") + e.what());
  }
  s.validate();
  return s;
}

}  // namespace fsts
