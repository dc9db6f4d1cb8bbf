#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "support/tempdir.hpp"

using namespace asff;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = lab::run_cli(std::move(args), {out, err});
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::size_t lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

// Small data and a single epoch keep each CLI run well under a second.
std::vector<std::string> tiny(const fs::path& out, std::size_t epochs = 1) {
  return {"--output_dir=" + out.string(), "--schedule.total_epochs=" + std::to_string(epochs),
          "--schedule.warmup_epochs=0",   "--scene.train_scenes=8",
          "--scene.val_scenes=4",         "--scene.analysis_scenes=1"};
}

std::vector<std::string> cat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override { setenv("ASFF_LAB_THREADS", "2", 1); }
  asff::testing::TempDir dir;
};

}  // namespace

TEST_F(CliTest, MissingConfigIsUsageErrorNamingPath) {
  const auto r = run({"train", "--config", (dir.path() / "nope.json").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("nope.json"), std::string::npos);
}

TEST_F(CliTest, UnknownKeyAndBadArgumentsAreUsageErrors) {
  EXPECT_EQ(run({"train", "--fusion_mod=sum"}).code, 2);
  EXPECT_EQ(run({"train", "--epsilon_ignore=3"}).code, 2);
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({"analyze", "--out", dir.path().string()}).code, 2);
  EXPECT_EQ(run({"--help"}).code, 0);
}

TEST_F(CliTest, TrainWritesRunDirectory) {
  const fs::path out = dir.path() / "run";
  const auto r = run(cat({"train", "--fusion_mode=sum", "--seeds=[3]"}, tiny(out)));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(lines(slurp(out / "metrics.csv")), 2u);
  EXPECT_TRUE(fs::exists(out / "checkpoint.bin"));
  const Json resolved = Json::parse(slurp(out / "resolved-config.json"));
  EXPECT_EQ(resolved["fusion_mode"], "sum");
  EXPECT_EQ(resolved["seeds"], Json::array({3}));
  EXPECT_EQ(resolved["tool_version"], kToolVersion);
}

TEST_F(CliTest, ResolvedConfigReproducesMetricsBitwise) {
  const fs::path first = dir.path() / "first";
  ASSERT_EQ(run(cat({"train", "--deterministic"}, tiny(first, 2))).code, 0);
  const fs::path second = dir.path() / "second";
  const auto r = run({"train", "--config", (first / "resolved-config.json").string(), "--output_dir=" + second.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(first / "metrics.csv"), slurp(second / "metrics.csv"));
  EXPECT_EQ(lines(slurp(second / "metrics.csv")), 3u);
}

TEST_F(CliTest, AnalyzeZeroInitWritesUniformWeightMaps) {
  const fs::path out = dir.path() / "run";
  ASSERT_EQ(run(cat({"train"}, tiny(out, 0))).code, 0);
  const fs::path an = dir.path() / "an";
  const auto r = run({"analyze", "--checkpoint", (out / "checkpoint.bin").string(), "--out", an.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::array<std::size_t, 3> side{16, 8, 4};
  for (std::size_t l = 0; l < 3; ++l) {
    for (std::size_t n = 0; n < 3; ++n) {
      const auto img = read_pgm(an / ("weights_l" + std::to_string(l + 1) + "_from" + std::to_string(n + 1) + ".pgm"));
      EXPECT_EQ(img.width, side[l]);
      EXPECT_EQ(img.height, side[l]);
      for (auto b : img.bytes) EXPECT_EQ(b, 85);
    }
  }
  EXPECT_TRUE(fs::exists(an / "scene.pgm"));
  EXPECT_TRUE(fs::exists(an / "scene.json"));
  const std::string csv = slurp(an / "conflict.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), kConflictCsvHeader);
  EXPECT_EQ(lines(csv), 1u + 16u * 16u);
  const Json summary = Json::parse(slurp(an / "summary.json"));
  EXPECT_EQ(summary["weight_maps"].size(), 9u);
  EXPECT_EQ(summary["coefficient_residuals"]["lambda_path"], 0.0);
}

TEST_F(CliTest, AnalyzeIdentityResizeReportsWeightedIdentity) {
  const fs::path out = dir.path() / "run";
  ASSERT_EQ(run(cat({"train", "--model.resize=identity", "--model.channels=[8,8,8]"}, tiny(out, 1))).code, 0);
  const fs::path an = dir.path() / "an";
  ASSERT_EQ(run({"analyze", "--checkpoint", (out / "checkpoint.bin").string(), "--out", an.string()}).code, 0);
  const Json summary = Json::parse(slurp(an / "summary.json"));
  EXPECT_EQ(summary["weighted_gradient_identity"]["pass"], true) << summary.dump(2);
  EXPECT_LE(summary["weighted_gradient_identity"]["max_abs_diff"].get<double>(), 1e-8);
}

TEST_F(CliTest, AnalyzeSumRunHasNoWeightMaps) {
  const fs::path out = dir.path() / "run";
  ASSERT_EQ(run(cat({"train", "--fusion_mode=sum"}, tiny(out, 0))).code, 0);
  const fs::path an = dir.path() / "an";
  ASSERT_EQ(run({"analyze", "--checkpoint", (out / "checkpoint.bin").string(), "--out", an.string(), "--scene_seed", "4"}).code, 0);
  const Json summary = Json::parse(slurp(an / "summary.json"));
  EXPECT_TRUE(summary["weight_maps"].empty());
  EXPECT_EQ(summary["scene_seed"], 4);
}

TEST_F(CliTest, AnalyzeBadCheckpointIsUsageError) {
  const fs::path bad = dir.path() / "bad.bin";
  std::ofstream(bad) << "ASFFgarbage";
  const auto r = run({"analyze", "--checkpoint", bad.string(), "--out", (dir.path() / "an").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("bad.bin"), std::string::npos);
}

TEST_F(CliTest, CompareWritesOneRowPerRun) {
  const fs::path out = dir.path() / "cmp";
  const fs::path cfg = dir.path() / "cmp.json";
  std::ofstream(cfg) << R"({"seeds": [1, 2], "arms": [{"name": "sum", "fusion_mode": "sum"}, {"name": "asff", "fusion_mode": "asff"}]})";
  const auto r = run(cat({"compare", "--config", cfg.string()}, tiny(out)));
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string csv = slurp(out / "compare.csv");
  EXPECT_EQ(lines(csv), 5u);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "arm,seed,ap50,conflict_mean");
  for (const char* arm : {"sum", "asff"})
    for (int seed : {1, 2}) EXPECT_TRUE(fs::exists(out / arm / ("seed_" + std::to_string(seed)) / "metrics.csv"));
  const Json summary = Json::parse(slurp(out / "summary.json"));
  ASSERT_EQ(summary["arms"].size(), 2u);
  EXPECT_EQ(summary["arms"][0]["arm"], "sum");
  EXPECT_EQ(summary["arms"][0]["runs_completed"], 2);
  EXPECT_TRUE(summary["failed"].empty());
}

TEST_F(CliTest, CompareSweepIsOrderedByEpsilon) {
  const fs::path out = dir.path() / "sweep";
  const fs::path cfg = dir.path() / "sweep.json";
  std::ofstream(cfg) << R"({"fusion_mode": "ignore", "seeds": [1],
    "arms": [{"epsilon_ignore": 0.5}, {"epsilon_ignore": 0.0}, {"epsilon_ignore": 0.2}]})";
  const auto r = run(cat({"compare", "--config", cfg.string()}, tiny(out)));
  ASSERT_EQ(r.code, 0) << r.err;
  const Json summary = Json::parse(slurp(out / "summary.json"));
  EXPECT_EQ(summary["ordered_by"], "epsilon_ignore");
  ASSERT_EQ(summary["arms"].size(), 3u);
  EXPECT_EQ(summary["arms"][0]["epsilon_ignore"], 0.0);
  EXPECT_EQ(summary["arms"][1]["epsilon_ignore"], 0.2);
  EXPECT_EQ(summary["arms"][2]["epsilon_ignore"], 0.5);
  EXPECT_EQ(summary["arms"][0]["arm"], "ignore_eps0");
}

TEST_F(CliTest, CompareRejectsDuplicateLabels) {
  const fs::path cfg = dir.path() / "dup.json";
  std::ofstream(cfg) << R"({"arms": [{"fusion_mode": "sum"}, {"fusion_mode": "sum"}]})";
  EXPECT_EQ(run(cat({"compare", "--config", cfg.string()}, tiny(dir.path() / "x"))).code, 2);
}

TEST_F(CliTest, ExportDumpsScenes) {
  const fs::path out = dir.path() / "scenes";
  const auto r = run({"export", "--split", "val", "--count", "3", "--out", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  for (int i = 0; i < 3; ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "scene_%04d", i);
    const auto img = read_pgm(out / (std::string(stem) + ".pgm"));
    EXPECT_EQ(img.width, 64u);
    const Json meta = Json::parse(slurp(out / (std::string(stem) + ".json")));
    EXPECT_TRUE(meta.contains("objects"));
  }
  EXPECT_EQ(run({"export", "--split", "test", "--out", out.string()}).code, 2);
}

TEST_F(CliTest, BadThreadCapIsUsageError) {
  setenv("ASFF_LAB_THREADS", "many", 1);
  EXPECT_EQ(run(cat({"compare"}, tiny(dir.path() / "x"))).code, 2);
}
