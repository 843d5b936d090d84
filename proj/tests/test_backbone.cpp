#include "doctest_main.hpp"

#include <limits>

#include "feedbacksts/backbone.hpp"
#include "feedbacksts/error.hpp"
#include "feedbacksts/profiler.hpp"
#include "test_util.hpp"

using namespace fsts;

namespace {

void perturb(torch::nn::Module& m, double scale, uint64_t seed) {
  torch::manual_seed(seed);
  torch::NoGradGuard g;
  for (auto& p : m.parameters()) p.add_(torch::randn_like(p) * scale);
}

FeedbackNet small_net(const std::string& variant, int64_t interval = 2) {
  NetworkConfig c;
  c.variant = variant;
  c.interval = interval;
  torch::manual_seed(0);
  return FeedbackNet(c);
}

// Which input frames reach each output frame of the propagation branch.
std::vector<std::set<int64_t>> frame_dependencies(RefinementModule& m, int64_t d) {
  std::vector<std::set<int64_t>> deps(d);
  auto x = torch::randn({1, 4, d, 8, 8}).requires_grad_(true);
  auto y = m->propagation(x);
  for (int64_t out = 0; out < d; ++out) {
    auto g = torch::autograd::grad({y.select(2, out).sum()}, {x}, {}, true)[0];
    for (int64_t in = 0; in < d; ++in)
      if (g.select(2, in).abs().sum().item<double>() > 0.0) deps[out].insert(in);
  }
  return deps;
}

}  // namespace

TEST_CASE("variants") {
  CHECK(VariantSpec::all().size() == 7);
  auto full = VariantSpec::parse("Full-FB");
  CHECK(full.encoder == "+++++");
  CHECK(full.decoder == "----");
  CHECK(VariantSpec::parse("Dec-NoFB").decoder == "~~~~");
  CHECK(VariantSpec::parse("Enc-NoFB").encoder == "~~~~~");
  CHECK_THROWS_WITH_AS(VariantSpec::parse("Half-FB"), doctest::Contains("Full-FB"), ValidationError);

  NetworkConfig c;
  c.variant = "nope";
  CHECK_THROWS_AS(c.validate(), ValidationError);
}

TEST_CASE("refinement modules keep D, H, W") {
  torch::manual_seed(1);
  RefinementModule fwd(8, 8, Direction::Forward, 2, 2);
  auto y = fwd->forward(torch::randn({1, 8, 5, 64, 64}));
  CHECK(y.sizes() == torch::IntArrayRef({1, 8, 5, 64, 64}));

  RefinementModule bwd(192, 64, Direction::Backward, 2, 2);
  auto deep = torch::randn({1, 128, 5, 16, 16});
  auto skip = torch::randn({1, 64, 5, 32, 32});
  auto merged = merge_skip(deep, skip);
  CHECK(merged.sizes() == torch::IntArrayRef({1, 192, 5, 32, 32}));
  CHECK(bwd->forward(deep, skip).sizes() == torch::IntArrayRef({1, 64, 5, 32, 32}));
  CHECK_THROWS_AS(merge_skip(deep, torch::randn({1, 64, 4, 32, 32})), ValidationError);

  PlainBlock plain(8, 16);
  CHECK(plain->forward(torch::randn({2, 8, 3, 16, 16})).sizes() == torch::IntArrayRef({2, 16, 3, 16, 16}));
}

TEST_CASE("propagation branch at identity init is affine and direction free") {
  torch::manual_seed(7);
  RefinementModule fwd(6, 4, Direction::Forward, 2, 2);
  torch::manual_seed(7);
  RefinementModule bwd(6, 4, Direction::Backward, 2, 2);
  torch::NoGradGuard g;
  for (int trial = 0; trial < 3; ++trial) {
    auto a = torch::randn({1, 6, 5, 16, 16});
    auto b = torch::randn({1, 6, 5, 16, 16});
    // the projection carries a bias, so superposition holds up to f(0)
    auto f0 = fwd->propagation(torch::zeros_like(a));
    auto lhs = fwd->propagation(a + b) + f0;
    auto rhs = fwd->propagation(a) + fwd->propagation(b);
    CHECK(((lhs - rhs).abs().max() / lhs.abs().max()).item<double>() < 1e-5);
    auto f2 = fwd->propagation(a * 2.5) - f0;
    CHECK(((f2 - 2.5 * (fwd->propagation(a) - f0)).abs().max() / f2.abs().max()).item<double>() < 1e-5);
    CHECK(torch::equal(bwd->propagation(a), fwd->propagation(a)));
  }
}

TEST_CASE("backward refinement mirrors the frame dependencies") {
  torch::manual_seed(3);
  RefinementModule fwd(4, 4, Direction::Forward, 2, 2);
  RefinementModule bwd(4, 4, Direction::Backward, 2, 2);
  perturb(*fwd, 0.1, 1);
  perturb(*bwd, 0.1, 2);
  auto f = frame_dependencies(fwd, 4);
  auto b = frame_dependencies(bwd, 4);
  // groups {0,2} and {1,3}; each frame is aligned onto the next one in its group
  CHECK(f[0] == std::set<int64_t>{0});
  CHECK(f[1] == std::set<int64_t>{1});
  CHECK(f[2] == std::set<int64_t>{0, 2});
  CHECK(f[3] == std::set<int64_t>{1, 3});
  // on the reversed axis the later frames feed the earlier ones
  CHECK(b[3] == std::set<int64_t>{3});
  CHECK(b[2] == std::set<int64_t>{2});
  CHECK(b[1] == std::set<int64_t>{1, 3});
  CHECK(b[0] == std::set<int64_t>{0, 2});
}

TEST_CASE("network forward contract") {
  auto net = small_net("Full-FB");
  net->eval();
  torch::NoGradGuard g;
  for (int64_t d : {1, 3, 5, 11, 13}) {
    auto y = net->forward(torch::rand({1, 1, d, 64, 64}));
    REQUIRE(y.sizes() == torch::IntArrayRef({1, 1, d, 64, 64}));
    CHECK(y.gt(0).all().item<bool>());
    CHECK(y.lt(1).all().item<bool>());
  }
  auto x = torch::rand({1, 1, 5, 64, 64});
  CHECK(torch::equal(net->forward(x), net->forward(x)));

  auto zero = net->forward(torch::zeros({1, 1, 5, 64, 64}));
  CHECK(torch::isfinite(zero).all().item<bool>());

  CHECK_THROWS_AS(net->forward(torch::rand({1, 1, 5, 60, 64})), ValidationError);
  CHECK_THROWS_AS(net->forward(torch::rand({1, 2, 5, 64, 64})), ValidationError);
  CHECK_THROWS_AS(net->forward(torch::rand({1, 5, 64, 64})), ValidationError);
  // the deepest stage is 2x2 here, too small for a two-level pyramid
  CHECK_THROWS_AS(net->forward(torch::rand({1, 1, 5, 32, 32})), ValidationError);
}

TEST_CASE("non-finite input is reported with the layer name") {
  auto net = small_net("Full-FB");
  net->eval();
  torch::NoGradGuard g;
  auto x = torch::rand({1, 1, 3, 64, 64});
  x[0][0][1][10][10] = std::numeric_limits<float>::quiet_NaN();
  try {
    net->forward(x);
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    CHECK(e.layer() == "conv_1");
  }
}

TEST_CASE("decoder of Dec-NoFB is plain") {
  auto net = small_net("Dec-NoFB");
  int plain = 0, refine = 0;
  for (const auto& child : net->named_children()) {
    auto* block = child.value()->as<StageBlockImpl>();
    if (!block) continue;
    const bool dec = child.key().rfind("dec_conv_", 0) == 0;
    if (dec) {
      CHECK(block->kind() == '~');
      CHECK(block->refine.is_empty());
      ++plain;
    } else {
      CHECK(block->kind() == '+');
      ++refine;
    }
  }
  CHECK(plain == 4);
  CHECK(refine == 5);
}

TEST_CASE("parameter counts") {
  const auto full = count_params(*small_net("Full-FB"));
  CHECK(count_params(*small_net("All-Fwd")) == full);
  CHECK(count_params(*small_net("All-Bwd")) == full);
  for (int64_t t = 1; t <= 4; ++t) CHECK(count_params(*small_net("Full-FB", t)) == full);
  CHECK(count_params(*small_net("Dec-NoFB")) < full);
  CHECK(count_params(*small_net("Enc-NoFB")) < count_params(*small_net("Dec-NoFB")));

  // one 3x3 conv with bias plus one BN: 1*8*9 + 8 + 2*8
  torch::nn::Sequential toy(torch::nn::Conv2d(torch::nn::Conv2dOptions(1, 8, 3)), torch::nn::BatchNorm2d(8));
  CHECK(count_params(*toy) == 96);
}

TEST_CASE("every parameter receives gradient") {
  auto net = small_net("Full-FB");
  perturb(*net, 0.05, 11);
  net->train();
  auto y = net->forward(torch::rand({1, 1, 3, 64, 64}));
  y.mean().backward();
  std::vector<std::string> dead;
  for (const auto& p : net->named_parameters())
    if (!p.value().grad().defined() || p.value().grad().abs().sum().item<double>() == 0.0) dead.push_back(p.key());
  CHECK_MESSAGE(dead.empty(), "no gradient: " << (dead.empty() ? "" : dead.front()));
}

TEST_CASE("layer capture") {
  auto net = small_net("Full-FB");
  net->eval();
  torch::NoGradGuard g;
  CHECK(FeedbackNetImpl::layer_names().size() == 10);
  net->set_capture({"conv_3", "dec_conv_1"});
  net->forward(torch::rand({1, 1, 5, 64, 64}));
  REQUIRE(net->captured().count("conv_3"));
  CHECK(net->captured().at("conv_3").sizes() == torch::IntArrayRef({1, 32, 5, 16, 16}));
  CHECK(net->captured().at("dec_conv_1").sizes() == torch::IntArrayRef({1, 8, 5, 64, 64}));
  CHECK_THROWS_WITH_AS(net->set_capture({"conv_9"}), doctest::Contains("conv_1"), ValidationError);
}

TEST_CASE("analytic FLOPs agree with a counted forward") {
  auto net = small_net("Full-FB");
  net->eval();
  torch::NoGradGuard g;
  for (int64_t t : {1, 3}) {
    net->set_interval(t);
    MacTally::Scope scope;
    net->forward(torch::rand({1, 1, 5, 64, 64}));
    CHECK(scope.count() == doctest::Approx(count_flops(net, 5, 64, 64)).epsilon(1e-12));
  }
}
