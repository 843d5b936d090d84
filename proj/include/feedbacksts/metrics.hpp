#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "feedbacksts/plane.hpp"

namespace fsts {

/// Pixel-wise `score > threshold` (strict).
MaskPlane binarize(const FloatPlane& scores, double threshold);

struct ConfusionCounts {
  int64_t tp = 0, fp = 0, fn = 0, tn = 0;

  int64_t total() const { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o);
};

ConfusionCounts confusion(const MaskPlane& pred, const MaskPlane& gt);

struct PixelMetrics {
  double iou = 0.0;
  double f1 = 0.0;
  double fa = 0.0;
};

/// iou = tp/(tp+fp+fn), f1 = 2tp/(2tp+fp+fn); both are 1 when pred and gt are
/// empty. fa = fp/total.
PixelMetrics pixel_metrics(const ConfusionCounts& c);
PixelMetrics pixel_metrics(const MaskPlane& pred, const MaskPlane& gt);

struct Component {
  double cy = 0.0, cx = 0.0;  // centroid
  int64_t pixels = 0;
};

/// 8-connected components in raster order of their first pixel.
std::vector<Component> connected_components(const MaskPlane& mask);

struct ObjectMatchResult {
  int64_t num_gt_targets = 0;
  int64_t num_detected = 0;
  int64_t num_matched = 0;
  int64_t false_alarm_pixels = 0;
  int64_t total_pixels = 0;

  double pd() const { return num_gt_targets == 0 ? 1.0 : static_cast<double>(num_matched) / num_gt_targets; }
  ObjectMatchResult& operator+=(const ObjectMatchResult& o);
};

/// Greedy nearest-first one-to-one matching of component centroids within
/// `max_dist` pixels.
ObjectMatchResult match_objects(const MaskPlane& pred, const MaskPlane& gt, double max_dist = 3.0);

struct RocPoint {
  double threshold = 0.0;
  double fa = 0.0;  // fp / total pixels
  double pd = 0.0;  // object-level
};

struct RocCurve {
  std::vector<RocPoint> points;  // thresholds descending
  double auc = 0.0;
};

/// `n` uniform thresholds from 1 down to 0.
std::vector<double> default_thresholds(int n = 201);

/// Area under Pd vs (Fa / max Fa), trapezoid rule from a (0,0) anchor. When no
/// threshold yields a false alarm the area is the best Pd reached.
RocCurve roc_auc(const std::vector<FloatPlane>& scores, const std::vector<MaskPlane>& gt,
                 const std::vector<double>& thresholds, double max_dist = 3.0);

/// 1 - fa * 1e3.
double fsr(double fa);

struct MetricReport {
  int64_t frames = 0;
  double threshold = 0.5;
  double miou = 0.0;
  double f1 = 0.0;
  double fa = 0.0;
  double pd = 0.0;
  double fsr = 0.0;
  ConfusionCounts counts;
  ObjectMatchResult objects;
  std::optional<double> auc;

  nlohmann::json to_json() const;
  static std::string csv_header();
  std::string csv_row() const;
};

/// Dataset-level report: confusion counts and object matches accumulated over
/// all frames before forming ratios.
MetricReport evaluate_frames(const std::vector<FloatPlane>& scores, const std::vector<MaskPlane>& gt,
                             double threshold = 0.5, double max_dist = 3.0);

std::string roc_csv(const RocCurve& curve);
RocCurve parse_roc_csv(const std::string& text);

}  // namespace fsts
