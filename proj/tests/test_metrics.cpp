#include "doctest_main.hpp"

#include <algorithm>
#include <random>

#include "feedbacksts/backbone.hpp"
#include "feedbacksts/error.hpp"
#include "feedbacksts/metrics.hpp"
#include "feedbacksts/profiler.hpp"
#include "test_util.hpp"

using namespace fsts;

namespace {

struct Counts {
  int64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

Counts count_pairs(const MaskPlane& p, const MaskPlane& g) {
  Counts c;
  for (size_t i = 0; i < p.data.size(); ++i) {
    const bool a = p.data[i], b = g.data[i];
    if (a && b) ++c.tp;
    if (a && !b) ++c.fp;
    if (!a && b) ++c.fn;
    if (!a && !b) ++c.tn;
  }
  return c;
}

void check_against_oracle(const MaskPlane& p, const MaskPlane& g) {
  const Counts o = count_pairs(p, g);
  const ConfusionCounts c = confusion(p, g);
  REQUIRE(c.tp == o.tp);
  REQUIRE(c.fp == o.fp);
  REQUIRE(c.fn == o.fn);
  REQUIRE(c.tn == o.tn);
  const PixelMetrics m = pixel_metrics(p, g);
  const int64_t uni = o.tp + o.fp + o.fn;
  const double iou = uni == 0 ? 1.0 : static_cast<double>(o.tp) / static_cast<double>(uni);
  const double f1 = uni == 0 ? 1.0 : 2.0 * o.tp / static_cast<double>(2 * o.tp + o.fp + o.fn);
  const double fa = static_cast<double>(o.fp) / static_cast<double>(p.size());
  REQUIRE(m.iou == iou);
  REQUIRE(m.f1 == f1);
  REQUIRE(m.fa == fa);
}

MaskPlane from_bits(int bits, int h, int w) {
  MaskPlane m(h, w);
  for (int i = 0; i < h * w; ++i) m.data[i] = (bits >> i) & 1;
  return m;
}

void paint(MaskPlane& m, std::initializer_list<std::pair<int, int>> px) {
  for (auto [y, x] : px) m.at(y, x) = 1;
}

// Largest one-to-one matching within the radius, by trying every assignment.
int64_t max_matching(const std::vector<Component>& gts, const std::vector<Component>& preds, double r) {
  if (gts.size() > preds.size()) return max_matching(preds, gts, r);
  std::vector<int> perm(preds.size());
  for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
  int64_t best = 0;
  do {
    int64_t m = 0;
    for (size_t i = 0; i < gts.size() && i < perm.size(); ++i) {
      const auto& p = preds[perm[i]];
      if (std::hypot(gts[i].cy - p.cy, gts[i].cx - p.cx) <= r) ++m;
    }
    best = std::max(best, m);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

}  // namespace

TEST_CASE("binarize is strict") {
  FloatPlane s(1, 3);
  s.data = {0.5f, 0.6f, 0.0f};
  auto b = binarize(s, 0.5);
  CHECK(b.data == std::vector<uint8_t>{0, 1, 0});
  CHECK(binarize(FloatPlane(2, 2, 1.0f), 0.5).data == std::vector<uint8_t>(4, 1));
  CHECK(binarize(s, 0.0).data == std::vector<uint8_t>{1, 1, 0});
}

TEST_CASE("pixel metrics match the exhaustive count on every 2x2 pair") {
  for (int a = 0; a < 16; ++a)
    for (int b = 0; b < 16; ++b) check_against_oracle(from_bits(a, 2, 2), from_bits(b, 2, 2));
}

TEST_CASE("pixel metrics match the oracle on 1000 random 8x8 pairs") {
  std::mt19937_64 rng(1234);
  std::uniform_int_distribution<int> bit(0, 1);
  std::uniform_real_distribution<double> dens(0.0, 1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    MaskPlane p(8, 8), g(8, 8);
    const double dp = dens(rng), dg = dens(rng);
    for (auto& v : p.data) v = dens(rng) < dp;
    for (auto& v : g.data) v = dens(rng) < dg;
    check_against_oracle(p, g);
  }
}

TEST_CASE("pixel metric examples") {
  MaskPlane p(3, 3), g(3, 3);
  paint(p, {{0, 0}, {0, 1}, {1, 0}, {1, 1}});
  paint(g, {{1, 1}, {1, 0}, {2, 2}, {2, 1}});
  auto m = pixel_metrics(p, g);
  CHECK(m.iou == doctest::Approx(1.0 / 3.0));
  CHECK(m.f1 == doctest::Approx(0.5));
  CHECK(m.fa == doctest::Approx(2.0 / 9.0));

  auto same = pixel_metrics(g, g);
  CHECK(same.iou == 1.0);
  CHECK(same.f1 == 1.0);
  CHECK(same.fa == 0.0);

  MaskPlane q(3, 3);
  paint(q, {{0, 2}});
  CHECK(pixel_metrics(q, g).iou == 0.0);
  CHECK(pixel_metrics(MaskPlane(3, 3), MaskPlane(3, 3)).iou == 1.0);
  CHECK_THROWS_AS(confusion(MaskPlane(3, 3), MaskPlane(3, 4)), ValidationError);
}

TEST_CASE("dataset mIoU accumulates counts before dividing") {
  MaskPlane g1(2, 2), p1(2, 2), g2(2, 2), p2(2, 2);
  paint(g1, {{0, 0}});
  paint(p1, {{0, 0}});
  paint(g2, {{0, 0}, {0, 1}, {1, 0}});
  paint(p2, {{1, 1}});
  FloatPlane s1(2, 2), s2(2, 2);
  for (int i = 0; i < 4; ++i) {
    s1.data[i] = p1.data[i];
    s2.data[i] = p2.data[i];
  }
  auto r = evaluate_frames({s1, s2}, {g1, g2});
  // tp 1, fp 1, fn 3 over both frames; per-frame averaging would give 0.5
  CHECK(r.miou == doctest::Approx(1.0 / 5.0));
  CHECK(r.counts.total() == 8);
  CHECK(r.fsr == doctest::Approx(1.0 - (1.0 / 8.0) * 1e3));
  CHECK_THROWS_WITH_AS(evaluate_frames({s1}, {g1, g2}), doctest::Contains("1 prediction frames vs 2"),
                       ValidationError);
}

TEST_CASE("connected components use 8-connectivity") {
  MaskPlane m(5, 5);
  paint(m, {{0, 0}, {1, 1}, {2, 2}, {0, 4}, {4, 0}, {4, 1}});
  auto cs = connected_components(m);
  REQUIRE(cs.size() == 3);
  CHECK(cs[0].pixels == 3);
  CHECK(cs[0].cy == doctest::Approx(1.0));
  CHECK(cs[1].cx == doctest::Approx(4.0));
  CHECK(cs[2].pixels == 2);
  CHECK(cs[2].cx == doctest::Approx(0.5));
}

TEST_CASE("object matching") {
  SUBCASE("offset by one pixel") {
    MaskPlane g(16, 16), p(16, 16);
    paint(g, {{5, 5}});
    paint(p, {{5, 6}});
    auto r = match_objects(p, g);
    CHECK(r.num_matched == 1);
    CHECK(r.pd() == 1.0);
    CHECK(r.false_alarm_pixels == 0);
  }
  SUBCASE("five pixels away") {
    MaskPlane g(16, 16), p(16, 16);
    paint(g, {{5, 5}});
    paint(p, {{5, 10}, {6, 10}});
    auto r = match_objects(p, g);
    CHECK(r.num_matched == 0);
    CHECK(r.false_alarm_pixels == 2);
  }
  SUBCASE("two targets, three detections") {
    MaskPlane g(16, 16), p(16, 16);
    paint(g, {{3, 3}, {3, 4}, {12, 12}});
    paint(p, {{4, 4}, {11, 13}, {12, 13}, {0, 14}, {0, 15}, {1, 15}});
    auto r = match_objects(p, g);
    CHECK(r.num_gt_targets == 2);
    CHECK(r.num_detected == 3);
    CHECK(r.num_matched == 2);
    CHECK(r.false_alarm_pixels == 3);
    CHECK(r.num_matched == max_matching(connected_components(g), connected_components(p), 3.0));
  }
  SUBCASE("greedy agrees with the best assignment on random sparse scenes") {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> pos(0, 15);
    for (int trial = 0; trial < 200; ++trial) {
      MaskPlane g(16, 16), p(16, 16);
      for (int k = 0; k < 3; ++k) g.at(pos(rng), pos(rng)) = 1;
      for (int k = 0; k < 4; ++k) p.at(pos(rng), pos(rng)) = 1;
      auto gc = connected_components(g), pc = connected_components(p);
      if (pc.size() > 6) continue;
      auto r = match_objects(p, g);
      REQUIRE(r.num_matched <= std::min(r.num_gt_targets, r.num_detected));
      REQUIRE(r.num_matched <= max_matching(gc, pc, 3.0));
    }
  }
}

TEST_CASE("fsr") {
  CHECK(std::abs(fsr(14.42e-6) - 0.98558) <= 1e-9);
  CHECK(fsr(0.0) == 1.0);
  CHECK(std::abs(fsr(1e-3)) <= 1e-15);
}

TEST_CASE("roc on a 3-level 8x8 frame") {
  // gt: a 2x2 blob and a single pixel; scores 0.875 on the blob, 0.625 on the pixel
  // and on a 3-pixel clutter blob, 0 elsewhere
  MaskPlane g(8, 8);
  paint(g, {{1, 1}, {1, 2}, {2, 1}, {2, 2}, {6, 6}});
  FloatPlane s(8, 8, 0.0f);
  for (auto [y, x] : std::vector<std::pair<int, int>>{{1, 1}, {1, 2}, {2, 1}, {2, 2}}) s.at(y, x) = 0.875f;
  for (auto [y, x] : std::vector<std::pair<int, int>>{{6, 6}, {0, 6}, {0, 7}, {1, 7}}) s.at(y, x) = 0.625f;

  // operating points: t >= 0.875 -> (0, 0); 0.625 <= t < 0.875 -> (0, 1/2); t < 0.625 -> (3/64, 1)
  // x normalised by 3/64: (0,0) (0,0.5) (1,1) -> area 0.75
  auto curve = roc_auc({s}, {g}, default_thresholds());
  CHECK(curve.auc == doctest::Approx(0.75).epsilon(1e-12));
  REQUIRE(curve.points.size() == 201);
  for (const auto& pt : curve.points) {
    const double t = pt.threshold;
    if (t >= 0.875) {
      CHECK(pt.pd == 0.0);
      CHECK(pt.fa == 0.0);
    } else if (t >= 0.625) {
      CHECK(pt.pd == 0.5);
      CHECK(pt.fa == 0.0);
    } else {
      CHECK(pt.pd == 1.0);
      CHECK(pt.fa == doctest::Approx(3.0 / 64.0));
    }
  }
  for (size_t i = 1; i < curve.points.size(); ++i) {
    CHECK(curve.points[i].fa >= curve.points[i - 1].fa);
    CHECK(curve.points[i].pd >= curve.points[i - 1].pd);
  }

  auto sparse = roc_auc({s}, {g}, {0.95, 0.7, 0.3});
  CHECK(sparse.auc == doctest::Approx(0.75));

  auto rt = parse_roc_csv(roc_csv(curve));
  REQUIRE(rt.points.size() == curve.points.size());
  CHECK(rt.auc == doctest::Approx(curve.auc));
  CHECK(rt.points[37].threshold == doctest::Approx(curve.points[37].threshold));
}

TEST_CASE("roc edge cases") {
  MaskPlane g(8, 8);
  paint(g, {{2, 2}, {5, 5}});
  FloatPlane exact(8, 8, 0.0f);
  exact.at(2, 2) = exact.at(5, 5) = 1.0f;
  auto perfect = roc_auc({exact}, {g}, default_thresholds());
  CHECK(perfect.auc == 1.0);
  CHECK(perfect.points.back().pd == 1.0);
  CHECK(perfect.points.back().fa == 0.0);

  auto flat = roc_auc({FloatPlane(8, 8, 0.5f)}, {g}, default_thresholds());
  std::set<std::pair<double, double>> distinct;
  for (const auto& p : flat.points) distinct.insert({p.fa, p.pd});
  CHECK(distinct.size() == 2);
  CHECK(flat.auc >= 0.0);
  CHECK(flat.auc <= 1.0);

  CHECK_THROWS_AS(roc_auc({}, {}, default_thresholds()), ValidationError);
  CHECK_THROWS_AS(roc_auc({exact}, {g}, {0.2, 0.5}), ValidationError);
  CHECK(default_thresholds().front() == 1.0);
  CHECK(default_thresholds().back() == 0.0);
}

TEST_CASE("report serialisation") {
  MaskPlane g(4, 4);
  paint(g, {{1, 1}});
  FloatPlane s(4, 4, 0.1f);
  s.at(1, 1) = 0.8f;
  auto r = evaluate_frames({s}, {g});
  auto j = r.to_json();
  CHECK(j["miou"].get<double>() == 1.0);
  CHECK(j["pd"].get<double>() == 1.0);
  CHECK(MetricReport::csv_header() == "frames,threshold,miou,f1,fa,pd,fsr,auc");
  CHECK(r.csv_row().rfind("1,", 0) == 0);
}

TEST_CASE("profiler bookkeeping") {
  torch::nn::Conv3d head(torch::nn::Conv3dOptions(8, 1, 1));
  CHECK(count_params(*head) == 9);

  NetworkConfig c;
  torch::manual_seed(0);
  FeedbackNet net(c);
  auto small = flops_ledger(net, 5, 64, 64);
  auto big = flops_ledger(net, 5, 128, 128);
  REQUIRE(small.entries().size() == big.entries().size());
  double sum = 0.0;
  for (size_t i = 0; i < small.entries().size(); ++i) {
    CHECK(small.entries()[i].layer == big.entries()[i].layer);
    CHECK(big.entries()[i].flops == 4.0 * small.entries()[i].flops);
    sum += small.entries()[i].flops;
  }
  CHECK(rel_err(sum, count_flops(net, 5, 64, 64)) <= 1e-9);
  CHECK(rel_err(small.total_with_prefix("conv_") + small.total_with_prefix("down_") +
                    small.total_with_prefix("dec_conv_") + small.total_with_prefix("head"),
                small.total()) <= 1e-9);

  // affine in D once every group has at least two frames
  const double f5 = count_flops(net, 5, 64, 64), f7 = count_flops(net, 7, 64, 64), f9 = count_flops(net, 9, 64, 64);
  CHECK(rel_err(f9 - f7, f7 - f5) <= 1e-12);

  for (int64_t d : {5, 9, 11}) {
    double prev = 0.0;
    for (int64_t t = 1; t <= 4; ++t) {
      net->set_interval(t);
      const double f = count_flops(net, d, 64, 64);
      if (t > 1) CHECK(f < prev);
      prev = f;
    }
  }
  net->set_interval(2);
  CHECK_THROWS_AS(count_flops(net, 5, 60, 64), ValidationError);

  auto rep = profile_network(net, 5, 64, 64, 0);
  CHECK(rep.param_count == count_params(*net));
  CHECK_FALSE(rep.fps.has_value());
  CHECK(rep.to_json()["param_count"].get<int64_t>() == rep.param_count);
  CHECK(ProfileReport::csv_header() == "variant,interval,depth,height,width,params,flops,fps");
}
