#include "feedbacksts/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <tuple>

#include "feedbacksts/error.hpp"

namespace fsts {

MaskPlane binarize(const FloatPlane& scores, double threshold) {
  MaskPlane out(scores.height, scores.width, 0);
  for (size_t i = 0; i < scores.size(); ++i) out.data[i] = scores.data[i] > threshold ? 1 : 0;
  return out;
}

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& o) {
  tp += o.tp;
  fp += o.fp;
  fn += o.fn;
  tn += o.tn;
  return *this;
}

ConfusionCounts confusion(const MaskPlane& pred, const MaskPlane& gt) {
  if (!pred.same_shape(gt))
    throw ValidationError("metric shape mismatch: prediction " + std::to_string(pred.height) + "x" +
                          std::to_string(pred.width) + " vs ground truth " + std::to_string(gt.height) + "x" +
                          std::to_string(gt.width));
  ConfusionCounts c;
  for (size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred.data[i] != 0, g = gt.data[i] != 0;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

PixelMetrics pixel_metrics(const ConfusionCounts& c) {
  PixelMetrics m;
  const int64_t uni = c.tp + c.fp + c.fn;
  m.iou = uni == 0 ? 1.0 : static_cast<double>(c.tp) / uni;
  m.f1 = uni == 0 ? 1.0 : 2.0 * c.tp / static_cast<double>(2 * c.tp + c.fp + c.fn);
  m.fa = c.total() == 0 ? 0.0 : static_cast<double>(c.fp) / c.total();
  return m;
}

PixelMetrics pixel_metrics(const MaskPlane& pred, const MaskPlane& gt) { return pixel_metrics(confusion(pred, gt)); }

namespace {

// Labels 8-connected components; returns per-pixel labels (-1 background).
std::vector<Component> label_components(const MaskPlane& mask, std::vector<int>* labels) {
  std::vector<Component> comps;
  std::vector<int> lab(mask.size(), -1);
  std::vector<std::pair<int, int>> stack;
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.at(y, x) || lab[static_cast<size_t>(y) * mask.width + x] >= 0) continue;
      const int id = static_cast<int>(comps.size());
      double sy = 0, sx = 0;
      int64_t n = 0;
      stack.assign(1, {y, x});
      lab[static_cast<size_t>(y) * mask.width + x] = id;
      while (!stack.empty()) {
        auto [cy, cx] = stack.back();
        stack.pop_back();
        sy += cy;
        sx += cx;
        ++n;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int ny = cy + dy, nx = cx + dx;
            if (ny < 0 || nx < 0 || ny >= mask.height || nx >= mask.width || !mask.at(ny, nx)) continue;
            int& l = lab[static_cast<size_t>(ny) * mask.width + nx];
            if (l >= 0) continue;
            l = id;
            stack.push_back({ny, nx});
          }
        }
      }
      comps.push_back({sy / n, sx / n, n});
    }
  }
  if (labels) *labels = std::move(lab);
  return comps;
}

double trapezoid_auc(const std::vector<RocPoint>& points) {
  double max_fa = 0.0, max_pd = 0.0;
  for (const auto& p : points) {
    max_fa = std::max(max_fa, p.fa);
    max_pd = std::max(max_pd, p.pd);
  }
  if (max_fa <= 0.0) return max_pd;
  double area = 0.0, px = 0.0, py = 0.0;
  for (const auto& p : points) {
    const double x = p.fa / max_fa;
    area += (x - px) * (p.pd + py) * 0.5;
    px = x;
    py = p.pd;
  }
  return std::clamp(area, 0.0, 1.0);
}

}  // namespace

std::vector<Component> connected_components(const MaskPlane& mask) { return label_components(mask, nullptr); }

ObjectMatchResult& ObjectMatchResult::operator+=(const ObjectMatchResult& o) {
  num_gt_targets += o.num_gt_targets;
  num_detected += o.num_detected;
  num_matched += o.num_matched;
  false_alarm_pixels += o.false_alarm_pixels;
  total_pixels += o.total_pixels;
  return *this;
}

ObjectMatchResult match_objects(const MaskPlane& pred, const MaskPlane& gt, double max_dist) {
  if (!pred.same_shape(gt)) throw ValidationError("match_objects: prediction and ground truth shapes differ");
  const auto gts = connected_components(gt);
  const auto preds = connected_components(pred);
  std::vector<std::tuple<double, size_t, size_t>> pairs;
  for (size_t i = 0; i < gts.size(); ++i) {
    for (size_t j = 0; j < preds.size(); ++j) {
      const double d = std::hypot(gts[i].cy - preds[j].cy, gts[i].cx - preds[j].cx);
      if (d <= max_dist) pairs.emplace_back(d, i, j);
    }
  }
  std::sort(pairs.begin(), pairs.end());
  std::vector<bool> gt_used(gts.size(), false), pred_used(preds.size(), false);
  ObjectMatchResult r;
  r.num_gt_targets = static_cast<int64_t>(gts.size());
  r.num_detected = static_cast<int64_t>(preds.size());
  r.total_pixels = static_cast<int64_t>(pred.size());
  for (const auto& [d, i, j] : pairs) {
    if (gt_used[i] || pred_used[j]) continue;
    gt_used[i] = pred_used[j] = true;
    ++r.num_matched;
  }
  for (size_t j = 0; j < preds.size(); ++j)
    if (!pred_used[j]) r.false_alarm_pixels += preds[j].pixels;
  return r;
}

std::vector<double> default_thresholds(int n) {
  if (n < 2) throw ValidationError("need at least two ROC thresholds");
  std::vector<double> t(n);
  for (int i = 0; i < n; ++i) t[i] = 1.0 - static_cast<double>(i) / (n - 1);
  return t;
}

RocCurve roc_auc(const std::vector<FloatPlane>& scores, const std::vector<MaskPlane>& gt,
                 const std::vector<double>& thresholds, double max_dist) {
  if (scores.empty()) throw ValidationError("roc: empty dataset");
  if (scores.size() != gt.size())
    throw ValidationError("roc: " + std::to_string(scores.size()) + " score maps vs " + std::to_string(gt.size()) +
                          " masks");
  for (size_t i = 0; i < thresholds.size(); ++i) {
    if (thresholds[i] < 0.0 || thresholds[i] > 1.0) throw ValidationError("roc: thresholds must lie in [0,1]");
    if (i > 0 && !(thresholds[i] < thresholds[i - 1])) throw ValidationError("roc: thresholds must be strictly descending");
  }
  RocCurve curve;
  for (double t : thresholds) {
    ConfusionCounts c;
    ObjectMatchResult o;
    for (size_t f = 0; f < scores.size(); ++f) {
      const MaskPlane b = binarize(scores[f], t);
      c += confusion(b, gt[f]);
      o += match_objects(b, gt[f], max_dist);
    }
    curve.points.push_back({t, pixel_metrics(c).fa, o.pd()});
  }
  curve.auc = trapezoid_auc(curve.points);
  return curve;
}

double fsr(double fa) { return 1.0 - fa * 1e3; }

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j{{"frames", frames},
                   {"threshold", threshold},
                   {"miou", miou},
                   {"f1", f1},
                   {"fa", fa},
                   {"pd", pd},
                   {"fsr", fsr},
                   {"counts", {{"tp", counts.tp}, {"fp", counts.fp}, {"fn", counts.fn}, {"tn", counts.tn}}},
                   {"objects",
                    {{"num_gt_targets", objects.num_gt_targets},
                     {"num_detected", objects.num_detected},
                     {"num_matched", objects.num_matched},
                     {"false_alarm_pixels", objects.false_alarm_pixels},
                     {"total_pixels", objects.total_pixels}}}};
  j["auc"] = auc ? nlohmann::json(*auc) : nlohmann::json(nullptr);
  return j;
}

std::string MetricReport::csv_header() { return "frames,threshold,miou,f1,fa,pd,fsr,auc"; }

std::string MetricReport::csv_row() const {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%lld,%.6g,%.10g,%.10g,%.10g,%.10g,%.10g,", static_cast<long long>(frames),
                threshold, miou, f1, fa, pd, fsr);
  std::string row = buf;
  if (auc) {
    std::snprintf(buf, sizeof(buf), "%.10g", *auc);
    row += buf;
  }
  return row;
}

MetricReport evaluate_frames(const std::vector<FloatPlane>& scores, const std::vector<MaskPlane>& gt,
                             double threshold, double max_dist) {
  if (scores.size() != gt.size())
    throw ValidationError("evaluate: " + std::to_string(scores.size()) + " prediction frames vs " +
                          std::to_string(gt.size()) + " ground-truth frames");
  if (scores.empty()) throw ValidationError("evaluate: no frames");
  MetricReport r;
  r.frames = static_cast<int64_t>(scores.size());
  r.threshold = threshold;
  for (size_t f = 0; f < scores.size(); ++f) {
    const MaskPlane b = binarize(scores[f], threshold);
    r.counts += confusion(b, gt[f]);
    r.objects += match_objects(b, gt[f], max_dist);
  }
  const PixelMetrics m = pixel_metrics(r.counts);
  r.miou = m.iou;
  r.f1 = m.f1;
  r.fa = m.fa;
  r.pd = r.objects.pd();
  r.fsr = fsts::fsr(r.fa);
  return r;
}

std::string roc_csv(const RocCurve& curve) {
  std::string out = "threshold,fa,pd\n";
  char buf[128];
  for (const auto& p : curve.points) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g\n", p.threshold, p.fa, p.pd);
    out += buf;
  }
  return out;
}

RocCurve parse_roc_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("threshold,fa,pd", 0) != 0)
    throw ValidationError("ROC CSV must start with the header threshold,fa,pd");
  RocCurve curve;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    RocPoint p;
    if (std::sscanf(line.c_str(), "%lf,%lf,%lf", &p.threshold, &p.fa, &p.pd) != 3)
      throw ValidationError("malformed ROC CSV row: " + line);
    curve.points.push_back(p);
  }
  if (curve.points.empty()) throw ValidationError("ROC CSV has no points");
  curve.auc = trapezoid_auc(curve.points);
  return curve;
}

}  // namespace fsts
