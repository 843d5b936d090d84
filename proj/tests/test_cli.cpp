#include "doctest_main.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "feedbacksts/commands.hpp"
#include "feedbacksts/image_io.hpp"
#include "feedbacksts/metrics.hpp"
#include "feedbacksts/training.hpp"
#include "test_util.hpp"

using namespace fsts;
using nlohmann::json;

namespace {

struct Result {
  int code = 0;
  std::string err;
};

Result cli(const std::vector<std::string>& args) {
  std::ostringstream err, out;
  auto* old_err = std::cerr.rdbuf(err.rdbuf());
  auto* old_out = std::cout.rdbuf(out.rdbuf());
  Result r;
  r.code = run_cli(args);
  std::cerr.rdbuf(old_err);
  std::cout.rdbuf(old_out);
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

size_t count_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) return 0;
  size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir)) n += e.is_regular_file();
  return n;
}

// Small and fast: 64x64 frames, one window per step.
fs::path write_smoke_config(const fs::path& dir, int epochs, const std::string& variant = "Full-FB") {
  json j = {{"data", {{"input_size", 64}, {"num_sequences", 2}, {"frames_per_sequence", 5}}},
            {"model", {{"variant", variant}}},
            {"train", {{"epochs", epochs}, {"batch_size", 1}}}};
  const fs::path p = dir / ("config_" + variant + ".json");
  std::ofstream(p) << j.dump(2);
  return p;
}

}  // namespace

TEST_CASE("exit codes") {
  CHECK(cli({"--help"}).code == 0);
  CHECK(cli({}).code == 2);
  CHECK(cli({"no-such-command"}).code == 2);
  CHECK(cli({"evaluate", "--pred", "x"}).code == 2);

  const char* exe = std::getenv("FEEDBACKSTS_CLI");
  if (exe) {
    TempDir tmp("exit");
    const std::string base = std::string(exe) + " --run-dir " + (tmp.path / "r").string();
    auto rc = [](const std::string& cmd) { return WEXITSTATUS(std::system((cmd + " >/dev/null 2>&1").c_str())); };
    CHECK(rc(std::string(exe) + " --help") == 0);
    CHECK(rc(base + " profile --input-shape 5 60 64") == 2);
    { std::ofstream(tmp.path / "bad.pt") << "junk"; }
    CHECK(rc(base + " infer --checkpoint " + (tmp.path / "bad.pt").string() + " --input " + tmp.path.string()) == 3);
    CHECK(rc(base + " profile --input-shape 3 64 64") == 0);
  }
}

TEST_CASE("generate-data") {
  TempDir tmp("gen");
  const fs::path a = tmp.path / "a", b = tmp.path / "b";
  REQUIRE(cli({"--seed", "4", "generate-data", "--out", a.string(), "--num-sequences", "2", "--frames", "33"}).code ==
          0);
  REQUIRE(cli({"--seed", "4", "generate-data", "--out", b.string(), "--num-sequences", "2", "--frames", "33"}).code ==
          0);
  for (const char* seq : {"seq_000", "seq_001"}) {
    CHECK(count_files(a / seq / "images") == 33);
    CHECK(count_files(a / seq / "masks") == 33);
    for (const auto& f : list_images(a / seq / "images"))
      REQUIRE(slurp(f) == slurp(b / seq / "images" / f.filename()));
    for (const auto& f : list_images(a / seq / "masks")) REQUIRE(slurp(f) == slurp(b / seq / "masks" / f.filename()));
  }
  CHECK(slurp(a / "seq_000" / "images" / frame_filename(0)) != slurp(a / "seq_001" / "images" / frame_filename(0)));

  auto refused = cli({"generate-data", "--out", a.string(), "--frames", "3"});
  CHECK(refused.code == 2);
  CHECK(refused.err.find("--force") != std::string::npos);
  CHECK(count_files(a / "seq_000" / "images") == 33);
  CHECK(cli({"generate-data", "--out", a.string(), "--frames", "3", "--force"}).code == 0);
  CHECK(count_files(a / "seq_000" / "images") == 3);

  json spec = {{"num_targets", 1}, {"colour", "red"}};
  std::ofstream(tmp.path / "spec.json") << spec.dump();
  CHECK(cli({"generate-data", "--out", (tmp.path / "c").string(), "--spec", (tmp.path / "spec.json").string()}).code ==
        2);
}

TEST_CASE("train, infer, evaluate, roc-plot") {
  TempDir tmp("pipeline");
  const fs::path data = tmp.path / "data";
  const fs::path cfg = write_smoke_config(tmp.path, 2);
  REQUIRE(cli({"--config", cfg.string(), "generate-data", "--out", data.string()}).code == 0);

  const fs::path run = tmp.path / "run";
  auto tr = cli({"--config", cfg.string(), "--run-dir", run.string(), "train", "--data", data.string()});
  REQUIRE_MESSAGE(tr.code == 0, tr.err);
  CHECK(fs::exists(run / checkpoint_name(1)));
  CHECK(fs::exists(run / checkpoint_name(2)));
  CHECK(fs::exists(run / "train_log.csv"));
  CHECK(fs::exists(run / "history.json"));
  const json echoed = json::parse(slurp(run / "config.json"));
  CHECK(echoed["model"]["variant"] == "Full-FB");
  CHECK(echoed["train"]["lr0"].get<double>() == 1e-5);
  CHECK(echoed["data"]["input_size"] == 64);

  SUBCASE("resume continues the schedule") {
    const fs::path run2 = tmp.path / "run2";
    auto rs = cli({"--config", cfg.string(), "--run-dir", run2.string(), "train", "--data", data.string(), "--resume",
                   (run / checkpoint_name(1)).string(), "--epochs", "6"});
    REQUIRE_MESSAGE(rs.code == 0, rs.err);
    const json h = json::parse(slurp(run2 / "history.json"));
    REQUIRE(h.size() == 6);
    CHECK(h[0]["loss"].get<double>() == read_checkpoint_meta(run / checkpoint_name(1)).history[0].loss);
    CHECK(h[4]["lr"].get<double>() == doctest::Approx(lr_at(5, TrainConfig{})));
    CHECK(h[5]["lr"].get<double>() == doctest::Approx(5e-6));
    CHECK_FALSE(fs::exists(run2 / checkpoint_name(1)));
    CHECK(fs::exists(run2 / checkpoint_name(6)));
  }

  SUBCASE("bad variant is a validation error") {
    json bad = json::parse(slurp(cfg));
    bad["model"]["variant"] = "Full-FBX";
    std::ofstream(tmp.path / "bad.json") << bad.dump();
    auto r = cli({"--config", (tmp.path / "bad.json").string(), "--run-dir", (tmp.path / "bad").string(), "train",
                  "--data", data.string()});
    CHECK(r.code == 2);
    for (const auto& v : VariantSpec::all()) CHECK(r.err.find(v.name) != std::string::npos);
  }

  SUBCASE("infer tiles a 22-frame sequence and dumps features") {
    const fs::path seq = tmp.path / "long";
    REQUIRE(cli({"--config", cfg.string(), "generate-data", "--out", seq.string(), "--num-sequences", "1", "--frames",
                 "22"})
                .code == 0);
    const fs::path out = tmp.path / "pred";
    auto r = cli({"infer", "--checkpoint", (run / checkpoint_name(2)).string(), "--input",
                  (seq / "seq_000").string(), "--out", out.string(), "--window", "11", "--dump-features",
                  "dec_conv_1,conv_3"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(count_files(out / "scores") == 22);
    CHECK(count_files(out / "dec_conv_1") == 22);
    CHECK(count_files(out / "conv_3") == 22);
    auto dump = read_gray(out / "dec_conv_1" / frame_filename(21));
    CHECK(dump.height == 64);

    auto unknown = cli({"infer", "--checkpoint", (run / checkpoint_name(2)).string(), "--input",
                        (seq / "seq_000").string(), "--out", (tmp.path / "p2").string(), "--dump-features", "conv_7"});
    CHECK(unknown.code == 2);
    CHECK(unknown.err.find("dec_conv_1") != std::string::npos);

    auto ev = cli({"evaluate", "--pred", out.string(), "--gt", (seq / "seq_000").string(), "--out",
                   (tmp.path / "ev").string(), "--roc"});
    REQUIRE_MESSAGE(ev.code == 0, ev.err);
    CHECK(json::parse(slurp(tmp.path / "ev" / "metrics.json"))["frames"] == 22);
  }

  SUBCASE("evaluate against copied masks") {
    const fs::path masks = data / "seq_000" / "masks";
    const fs::path out = tmp.path / "eval";
    auto r = cli({"evaluate", "--pred", masks.string(), "--gt", (data / "seq_000").string(), "--out", out.string(),
                  "--roc"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const json m = json::parse(slurp(out / "metrics.json"));
    CHECK(m["miou"].get<double>() == 1.0);
    CHECK(m["fa"].get<double>() == 0.0);
    CHECK(m["pd"].get<double>() == 1.0);
    CHECK(fs::exists(out / "metrics.csv"));
    REQUIRE(fs::exists(out / "roc.csv"));
    CHECK(fs::file_size(out / "roc.png") > 0);
    auto curve = parse_roc_csv(slurp(out / "roc.csv"));
    REQUIRE(curve.points.size() == 201);
    for (size_t i = 1; i < curve.points.size(); ++i) CHECK(curve.points[i].fa >= curve.points[i - 1].fa);

    auto plot = cli({"roc-plot", "--csv", (out / "roc.csv").string(), "--out", (tmp.path / "again.png").string()});
    CHECK(plot.code == 0);
    CHECK(slurp(tmp.path / "again.png") == slurp(out / "roc.png"));

    const fs::path short_gt = tmp.path / "short";
    fs::create_directories(short_gt / "masks");
    auto files = list_images(masks);
    for (size_t i = 0; i + 1 < files.size(); ++i) fs::copy_file(files[i], short_gt / "masks" / files[i].filename());
    auto mm = cli({"evaluate", "--pred", masks.string(), "--gt", short_gt.string(), "--out",
                   (tmp.path / "e2").string()});
    CHECK(mm.code == 2);
    CHECK(mm.err.find(std::to_string(files.size())) != std::string::npos);
    CHECK(mm.err.find(std::to_string(files.size() - 1)) != std::string::npos);
  }
}

TEST_CASE("profile") {
  TempDir tmp("profile");
  auto r = cli({"--run-dir", tmp.path.string(), "profile", "--input-shape", "5", "64", "64", "--sweep-t", "--layers"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  std::istringstream csv(slurp(tmp.path / "profile.csv"));
  std::string line;
  std::getline(csv, line);
  CHECK(line.rfind("variant,interval,depth,height,width,params,flops", 0) == 0);
  std::vector<double> flops;
  while (std::getline(csv, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    REQUIRE(cells.size() >= 7);
    flops.push_back(std::stod(cells[6]));
  }
  REQUIRE(flops.size() == 4);
  for (size_t i = 1; i < flops.size(); ++i) CHECK(flops[i] < flops[i - 1]);
  CHECK(fs::exists(tmp.path / "profile_layers.csv"));
  CHECK(json::parse(slurp(tmp.path / "profile.json")).size() == 4);
}

TEST_CASE("ablate") {
  TempDir tmp("ablate");
  auto r = cli({"--run-dir", (tmp.path / "all").string(), "ablate", "--input-shape", "5", "64", "64"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  std::istringstream csv(slurp(tmp.path / "all" / "ablation.csv"));
  std::string line;
  int rows = -1;
  while (std::getline(csv, line)) ++rows;
  CHECK(rows == 7);

  CHECK(cli({"--run-dir", (tmp.path / "x").string(), "ablate", "--variants", "Full-FB,Nope"}).code == 2);

  const fs::path cfg = write_smoke_config(tmp.path, 3);
  const fs::path data = tmp.path / "data";
  REQUIRE(cli({"--config", cfg.string(), "generate-data", "--out", data.string(), "--num-sequences", "1"}).code == 0);
  auto s = cli({"--config", cfg.string(), "--run-dir", (tmp.path / "smoke").string(), "ablate", "--variants",
                "Full-FB,Dec-NoFB", "--data", data.string(), "--input-shape", "5", "64", "64"});
  REQUIRE_MESSAGE(s.code == 0, s.err);
  for (const char* v : {"Full-FB", "Dec-NoFB"}) {
    CHECK(fs::exists(tmp.path / "smoke" / v / "train_log.csv"));
    CHECK(fs::exists(tmp.path / "smoke" / v / checkpoint_name(3)));
  }
  const std::string table = slurp(tmp.path / "smoke" / "ablation.csv");
  CHECK(table.find("final_loss") != std::string::npos);
}
