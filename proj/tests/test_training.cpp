#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include "asff/training.hpp"
#include "support/tempdir.hpp"

using namespace asff;

namespace {

ParamList<double> single_param(double value, Tensor<double>& holder) {
  holder = Tensor<double>(Shape{1, 1, 1, 1}, value, true);
  return {{"p", holder}};
}

void set_grad(Tensor<double>& t, double g) {
  t.grad_buffer()[0] = g;
}

RunConfig tiny_run(std::size_t epochs) {
  RunConfig cfg;
  cfg.data.train_scenes = 16;
  cfg.data.val_scenes = 8;
  cfg.data.analysis_scenes = 2;
  cfg.schedule.total_epochs = static_cast<double>(epochs);
  cfg.schedule.warmup_epochs = epochs > 1 ? 1 : 0;
  return cfg;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::size_t line_count(const std::string& text) { return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')); }

}  // namespace

TEST(Schedule, EndpointsAndMidpoint) {
  const ScheduleConfig s;
  EXPECT_EQ(lr_at(0, s), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(1, s), 0.005);
  EXPECT_DOUBLE_EQ(lr_at(2, s), 0.01);
  EXPECT_DOUBLE_EQ(lr_at(30, s), 1e-4);
  EXPECT_NEAR(lr_at(16, s), 0.5 * (0.01 + 1e-4), 1e-15);
  EXPECT_DOUBLE_EQ(lr_at(45, s), 1e-4);
  EXPECT_EQ(lr_at(-1, s), 0.0);
}

TEST(Schedule, ContinuousAndDecreasingAfterWarmup) {
  const ScheduleConfig s;
  EXPECT_NEAR(lr_at(2 - 1e-9, s), lr_at(2 + 1e-9, s), 1e-10);
  double prev = lr_at(2, s);
  for (double e = 2.05; e <= 30; e += 0.05) {
    const double lr = lr_at(e, s);
    EXPECT_LE(lr, prev + 1e-18);
    EXPECT_GE(lr, s.lr_min - 1e-18);
    prev = lr;
  }
  for (double e = 0; e < 2; e += 0.1) EXPECT_NEAR(lr_at(e, s), 0.01 * e / 2, 1e-15);
}

TEST(Schedule, InvalidSchedulesRejected) {
  ScheduleConfig s;
  s.lr_min = 0;
  EXPECT_THROW(validate(s), ConfigurationError);
  s = {};
  s.lr_max = 1e-5;
  EXPECT_THROW(validate(s), ConfigurationError);
  s = {};
  s.warmup_epochs = 30;
  EXPECT_THROW(validate(s), ConfigurationError);
}

TEST(Sgd, ZeroLearningRateKeepsParameters) {
  Tensor<double> p;
  const auto params = single_param(1.5, p);
  auto v = zero_velocity(params);
  set_grad(p, 0.25);
  sgd_step(params, v, 0.0);
  EXPECT_EQ(p[0], 1.5);
  EXPECT_DOUBLE_EQ(v[0][0], 0.25 + 0.0005 * 1.5);
}

TEST(Sgd, PlainGradientDescent) {
  Tensor<double> p;
  const auto params = single_param(2.0, p);
  auto v = zero_velocity(params);
  set_grad(p, 3.0);
  sgd_step(params, v, 0.1, SgdConfig{0.0, 0.0});
  EXPECT_DOUBLE_EQ(p[0], 2.0 - 0.1 * 3.0);
}

TEST(Sgd, MomentumOnQuadraticFollowsRecurrence) {
  const double a = 3.0, lr = 0.05, mu = 0.9, wd = 0.01;
  Tensor<double> p;
  const auto params = single_param(1.0, p);
  auto v = zero_velocity(params);
  double x = 1.0, vel = 0.0;
  for (int step = 0; step < 50; ++step) {
    set_grad(p, a * p[0]);
    sgd_step(params, v, lr, SgdConfig{mu, wd});
    vel = mu * vel + a * x + wd * x;
    x -= lr * vel;
    EXPECT_NEAR(p[0], x, 1e-14);
  }
  EXPECT_LT(std::abs(x), 0.1);
}

TEST(Sgd, ParameterWithoutGradientOnlyDecays) {
  Tensor<double> p(Shape{1, 1, 1, 1}, 4.0, true);
  const ParamList<double> params{{"q", p}};
  auto v = zero_velocity(params);
  sgd_step(params, v, 0.5, SgdConfig{0.9, 0.1});
  EXPECT_DOUBLE_EQ(p[0], 4.0 - 0.5 * 0.4);
}

TEST(Sgd, NonFiniteGradientNamesParameterAndChangesNothing) {
  Tensor<double> a(Shape{1, 1, 1, 2}, 1.0, true);
  Tensor<double> b(Shape{1, 1, 1, 1}, 1.0, true);
  const ParamList<double> params{{"level1.head.weight", a}, {"level2.fusion.bias", b}};
  auto v = zero_velocity(params);
  a.grad_buffer()[0] = 1.0;
  b.grad_buffer()[0] = std::nan("");
  try {
    sgd_step(params, v, 0.1);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("level2.fusion.bias"), std::string::npos);
  }
  EXPECT_EQ(a[0], 1.0);
  EXPECT_EQ(v[0][0], 0.0);
}

TEST(Sgd, VelocityMismatchRejected) {
  Tensor<double> p;
  const auto params = single_param(1.0, p);
  std::vector<Tensor<double>> v;
  EXPECT_THROW(sgd_step(params, v, 0.1), InvalidArgument);
  v.emplace_back(Shape{1, 1, 1, 2});
  EXPECT_THROW(sgd_step(params, v, 0.1), DimensionError);
}

TEST(Train, ZeroEpochsWritesInitialCheckpointOnly) {
  asff::testing::TempDir dir;
  const TrainResult r = train(tiny_run(0), 1, dir.path());
  EXPECT_TRUE(r.history.empty());
  EXPECT_EQ(slurp(dir.path() / kMetricsFile), std::string(kMetricsHeader) + "\n");
  const LoadedRun run = load_run(dir.path() / kCheckpointFile);
  EXPECT_EQ(run.state.epoch, 0u);
  for (const auto& p : run.state.model.fusion_parameters())
    for (float x : p.tensor.data()) EXPECT_EQ(x, 0.0f);
}

TEST(Train, OneEpochWritesOneRowAndMovesFusionParameters) {
  asff::testing::TempDir dir;
  const TrainResult r = train(tiny_run(1), 2, dir.path());
  ASSERT_EQ(r.history.size(), 1u);
  const std::string csv = slurp(dir.path() / kMetricsFile);
  EXPECT_EQ(line_count(csv), 2u);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), kMetricsHeader);
  EXPECT_EQ(csv.substr(csv.find('\n') + 1), format_metrics_row(r.history[0]) + "\n");
  EXPECT_TRUE(std::isfinite(r.history[0].loss));
  EXPECT_GE(r.history[0].ap50, 0.0);
  EXPECT_LE(r.history[0].ap50, 1.0);
  EXPECT_GE(r.history[0].conflict_mean, 0.0);
  EXPECT_LE(r.history[0].conflict_mean, 1.0);
  double moved = 0;
  for (const auto& p : r.state.model.fusion_parameters())
    for (float x : p.tensor.data()) moved = std::max(moved, std::abs(static_cast<double>(x)));
  EXPECT_GT(moved, 0.0);
  EXPECT_FALSE(std::filesystem::exists(dir.path() / (std::string(kCheckpointFile) + ".tmp")));
}

TEST(Train, SameSeedIsBitwiseReproducible) {
  asff::testing::TempDir a, b;
  train(tiny_run(2), 3, a.path());
  train(tiny_run(2), 3, b.path());
  EXPECT_EQ(slurp(a.path() / kMetricsFile), slurp(b.path() / kMetricsFile));
  EXPECT_EQ(slurp(a.path() / kCheckpointFile), slurp(b.path() / kCheckpointFile));
  asff::testing::TempDir c;
  train(tiny_run(2), 4, c.path());
  EXPECT_NE(slurp(a.path() / kCheckpointFile), slurp(c.path() / kCheckpointFile));
}

TEST(Train, CheckpointRestoresTrainedState) {
  asff::testing::TempDir dir;
  const TrainResult r = train(tiny_run(1), 5, dir.path());
  const LoadedRun run = load_run(dir.path() / kCheckpointFile);
  EXPECT_EQ(run.state.epoch, 1u);
  EXPECT_EQ(run.state.seed, 5u);
  const auto want = r.state.model.parameters();
  const auto got = run.state.model.parameters();
  ASSERT_EQ(want.size(), got.size());
  for (std::size_t k = 0; k < want.size(); ++k) {
    EXPECT_EQ(want[k].name, got[k].name);
    EXPECT_TRUE(std::equal(want[k].tensor.data().begin(), want[k].tensor.data().end(), got[k].tensor.data().begin()));
    EXPECT_TRUE(std::equal(r.state.velocity[k].data().begin(), r.state.velocity[k].data().end(),
                           run.state.velocity[k].data().begin()));
  }
}

TEST(Train, DivergenceRaisesAndKeepsLastGoodCheckpoint) {
  asff::testing::TempDir dir;
  RunConfig cfg = tiny_run(3);
  cfg.schedule.warmup_epochs = 0;
  cfg.schedule.lr_max = 1e12;
  cfg.schedule.lr_min = 1e11;
  try {
    train(cfg, 6, dir.path());
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("last good checkpoint"), std::string::npos);
  }
  const LoadedRun run = load_run(dir.path() / kCheckpointFile);
  EXPECT_LT(run.state.epoch, 3u);
  EXPECT_EQ(line_count(slurp(dir.path() / kMetricsFile)), run.state.epoch + 1);
  for (const auto& p : run.state.model.parameters())
    for (float x : p.tensor.data()) ASSERT_TRUE(std::isfinite(x));
}

TEST(Train, InvalidConfigRejectedBeforeWriting) {
  asff::testing::TempDir dir;
  RunConfig cfg = tiny_run(1);
  cfg.batch_size = 0;
  EXPECT_THROW(train(cfg, 1, dir.path() / "run"), ConfigurationError);
  EXPECT_FALSE(std::filesystem::exists(dir.path() / "run"));
}

TEST(Metrics, RowFormat) {
  EpochMetrics m{3, 0.005, 0.25, 0.5, 0.125};
  EXPECT_EQ(format_metrics_row(m), "3,0.005,0.25,0.5,0.125");
}
