#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "asff/analyzer.hpp"
#include "asff/errors.hpp"
#include "asff/optimizer.hpp"
#include "asff/scene.hpp"
#include "support/oracles.hpp"

using namespace asff;
using asff::testing::random_tensor;

namespace {

ModelConfig identity_config(FusionMode fusion, bool detach) {
  ModelConfig cfg;
  cfg.channels = {6, 6, 6};
  cfg.stem_channels = 4;
  cfg.fusion = fusion;
  cfg.resize = ResizeMode::identity;
  cfg.detach_weights = detach;
  return cfg;
}

struct Batch {
  std::vector<SyntheticScene> scenes;
  Tensor<double> images;
  TargetMaps<double> targets;
};

Batch make_batch(std::uint64_t seed, std::size_t n, std::size_t size, const LevelStrides& strides) {
  SceneConfig sc;
  sc.image_size = size;
  Batch b;
  for (std::size_t i = 0; i < n; ++i) b.scenes.push_back(generate_scene(seed * 100 + i, sc));
  b.images = make_image_batch<double>(b.scenes);
  b.targets = build_targets<double>(b.scenes, strides, {});
  return b;
}

void randomize_lambda(Detector<double>& model, std::uint64_t seed, double stddev) {
  std::mt19937_64 rng(seed);
  auto& lam = model.fusion_params().lambda;
  for (std::size_t l = 0; l < kLevels; ++l) {
    for (std::size_t n = 0; n < kLevels; ++n) {
      Tensor<double> w = random_tensor<double>(rng, lam.weight[l][n].shape(), false, stddev);
      Tensor<double> b = random_tensor<double>(rng, lam.bias[l][n].shape(), false, stddev);
      std::copy(w.data().begin(), w.data().end(), lam.weight[l][n].data().begin());
      std::copy(b.data().begin(), b.data().end(), lam.bias[l][n].data().begin());
    }
  }
}

double norm(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

TEST(Decomposition, SumIdentityContributionsEqualOutputGradients) {
  Detector<double> model(identity_config(FusionMode::sum, false), 1);
  const Batch b = make_batch(1, 2, 32, model.strides());
  const auto maps = decompose_all(model, b.images, b.targets);
  for (std::size_t l = 0; l < kLevels; ++l) {
    ASSERT_EQ(maps.contribution[l].size(), maps.output_grad[l].size());
    for (std::size_t i = 0; i < maps.contribution[l].size(); ++i) EXPECT_EQ(maps.contribution[l][i], maps.output_grad[l][i]);
  }
  for (std::size_t i = 0; i < maps.total.size(); ++i) {
    const double sum = maps.contribution[0][i] + maps.contribution[1][i] + maps.contribution[2][i];
    EXPECT_NEAR(maps.total[i], sum, 1e-10);
  }
}

TEST(Decomposition, SeededPartsSumToTotalWithRealResize) {
  for (auto fusion : {FusionMode::sum, FusionMode::concat, FusionMode::asff}) {
    ModelConfig cfg;
    cfg.fusion = fusion;
    Detector<double> model(cfg, 2);
    if (fusion == FusionMode::asff) randomize_lambda(model, 3, 0.5);
    const Batch b = make_batch(2, 2, 32, model.strides());
    const auto maps = decompose_all(model, b.images, b.targets);
    double worst = 0;
    for (std::size_t i = 0; i < maps.total.size(); ++i) {
      worst = std::max(worst, std::abs(maps.total[i] - (maps.contribution[0][i] + maps.contribution[1][i] + maps.contribution[2][i])));
    }
    EXPECT_LE(worst, 1e-10) << to_string(fusion);
  }
}

TEST(Decomposition, DetachedIdentityTotalIsWeightedSum) {
  Detector<double> model(identity_config(FusionMode::asff, true), 4);
  randomize_lambda(model, 5, 1.0);
  const Batch b = make_batch(3, 2, 32, model.strides());
  const auto maps = decompose_all(model, b.images, b.targets);
  const Shape& s = maps.shape;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t i = 0; i < s.h; ++i)
        for (std::size_t j = 0; j < s.w; ++j) {
          double want = 0;
          for (std::size_t l = 0; l < kLevels; ++l) want += maps.weights[l].at(n, 0, i, j) * maps.output_grad[l].at(n, c, i, j);
          EXPECT_NEAR(maps.total[((n * s.c + c) * s.h + i) * s.w + j], want, 1e-10);
        }
}

TEST(Decomposition, SuppressedLevelsLeaveFirstContribution) {
  Detector<double> model(identity_config(FusionMode::asff, false), 6);
  randomize_lambda(model, 7, 0.1);
  auto& lam = model.fusion_params().lambda;
  for (std::size_t l : {1u, 2u}) lam.bias[l][0][0] = -30.0;
  const Batch b = make_batch(4, 2, 32, model.strides());
  const auto maps = decompose_all(model, b.images, b.targets);
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t i = 0; i < maps.shape.h; ++i) {
      for (std::size_t j = 0; j < maps.shape.w; ++j) {
        const auto d = decomposition_at(maps, {n, i, j});
        EXPECT_LT(d.weight[1], 1e-12);
        EXPECT_LT(d.weight[2], 1e-12);
        std::vector<double> diff(d.total.size());
        for (std::size_t c = 0; c < diff.size(); ++c) diff[c] = d.total[c] - d.contribution[0][c];
        EXPECT_LE(norm(diff), 1e-6 * norm(d.contribution[0]) + 1e-9);
      }
    }
  }
}

TEST(Decomposition, OutOfRangePositionIsRangeError) {
  Detector<double> model(ModelConfig{}, 1);
  const Batch b = make_batch(5, 1, 32, model.strides());
  const auto maps = decompose_all(model, b.images, b.targets);
  EXPECT_THROW(decomposition_at(maps, {0, 8, 0}), RangeError);
  EXPECT_THROW(decomposition_at(maps, {1, 0, 0}), RangeError);
  EXPECT_THROW(decompose_gradient(model, b.images, b.targets, {0, 0, 8}), RangeError);
  EXPECT_NO_THROW(decompose_gradient(model, b.images, b.targets, {0, 7, 7}));
}

TEST(Decomposition, WeightsReportedPerMode) {
  const Batch b = make_batch(6, 1, 32, LevelStrides{4, 8, 16});
  ModelConfig cfg;
  cfg.fusion = FusionMode::sum;
  const auto ds = decomposition_at(decompose_all(Detector<double>(cfg, 1), b.images, b.targets), {0, 1, 1});
  for (double w : ds.weight) EXPECT_EQ(w, 1.0);
  cfg.fusion = FusionMode::concat;
  const auto dc = decomposition_at(decompose_all(Detector<double>(cfg, 1), b.images, b.targets), {0, 1, 1});
  for (double w : dc.weight) EXPECT_TRUE(std::isnan(w));
  cfg.fusion = FusionMode::asff;
  const auto da = decomposition_at(decompose_all(Detector<double>(cfg, 1), b.images, b.targets), {0, 1, 1});
  for (double w : da.weight) EXPECT_NEAR(w, 1.0 / 3.0, 1e-15);
}

TEST(ConflictMetric, SingleSourceIsZero) {
  const std::array<std::vector<double>, kLevels> g{std::vector<double>{1.5, -2.0}, std::vector<double>{0, 0},
                                                   std::vector<double>{0, 0}};
  EXPECT_EQ(conflict_metric(g), 0.0);
}

TEST(ConflictMetric, CancellationIsOne) {
  const std::array<std::vector<double>, kLevels> g{std::vector<double>{1.5, -2.0}, std::vector<double>{-1.5, 2.0},
                                                   std::vector<double>{0, 0}};
  EXPECT_EQ(conflict_metric(g), 1.0);
}

TEST(ConflictMetric, AllZeroIsZero) {
  const std::array<std::vector<double>, kLevels> g{std::vector<double>(3), std::vector<double>(3), std::vector<double>(3)};
  EXPECT_EQ(conflict_metric(g), 0.0);
}

TEST(ConflictMetric, MatchesFormulaOnRandomTriplets) {
  std::mt19937_64 rng(70);
  std::normal_distribution<double> dist;
  for (int trial = 0; trial < 1000; ++trial) {
    std::array<std::vector<double>, kLevels> g;
    for (auto& v : g) {
      v.resize(4);
      for (auto& x : v) x = dist(rng);
    }
    double net = 0, gross = 0;
    for (std::size_t c = 0; c < 4; ++c) {
      net += std::abs(g[0][c] + g[1][c] + g[2][c]);
      gross += std::abs(g[0][c]) + std::abs(g[1][c]) + std::abs(g[2][c]);
    }
    const double m = conflict_metric(g);
    EXPECT_NEAR(m, 1.0 - net / gross, 1e-12);
    EXPECT_GE(m, 0.0);
    EXPECT_LE(m, 1.0);
  }
}

TEST(WeightedIdentity, ZeroInitPassesTightly) {
  Detector<double> model(identity_config(FusionMode::asff, true), 8);
  const Batch b = make_batch(7, 2, 32, model.strides());
  const auto rep = verify_weighted_identity(model, b.images, b.targets, 1e-10);
  EXPECT_TRUE(rep.pass) << rep.max_abs_diff;
  const auto maps = decompose_all(model, b.images, b.targets);
  for (std::size_t i = 0; i < maps.total.size(); ++i) {
    const double mean = (maps.output_grad[0][i] + maps.output_grad[1][i] + maps.output_grad[2][i]) / 3.0;
    EXPECT_NEAR(maps.total[i], mean, 1e-10);
  }
}

TEST(WeightedIdentity, HardSelectorPicksOneSeededGradient) {
  Detector<double> model(identity_config(FusionMode::asff, true), 9);
  auto& lam = model.fusion_params().lambda;
  for (std::size_t l = 0; l < kLevels; ++l) lam.bias[l][l][0] = 50.0;
  const Batch b = make_batch(8, 2, 32, model.strides());
  const auto maps = decompose_all(model, b.images, b.targets);
  for (std::size_t l = 0; l < kLevels; ++l)
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < maps.shape.h; ++i)
        for (std::size_t j = 0; j < maps.shape.w; ++j)
          EXPECT_NEAR(maps.weights[l].at(n, 0, i, j), l == 0 ? 1.0 : 0.0, 1e-15);
  for (std::size_t i = 0; i < maps.total.size(); ++i) {
    EXPECT_NEAR(maps.total[i], maps.output_grad[0][i], 1e-15 + 1e-12 * std::abs(maps.output_grad[0][i]));
  }
  EXPECT_TRUE(verify_weighted_identity(model, b.images, b.targets, 1e-10).pass);
}

TEST(WeightedIdentity, PassesAfterTrainingSteps) {
  Detector<double> model(identity_config(FusionMode::asff, false), 10);
  const Batch b = make_batch(9, 4, 32, model.strides());
  const ParamList<double> params = model.parameters();
  auto velocity = zero_velocity(params);
  for (int step = 0; step < 5; ++step) {
    zero_grads(params);
    Graph<double> g;
    const auto fr = model.forward(g, b.images);
    g.backward(detection_loss(g, fr.preds, b.targets));
    sgd_step(params, velocity, 0.05);
  }
  double spread = 0;
  for (const auto& p : model.fusion_parameters())
    for (double v : p.tensor.data()) spread = std::max(spread, std::abs(v));
  EXPECT_GT(spread, 0.0);
  Detector<double> frozen = model;
  frozen.config().detach_weights = true;
  const auto rep = verify_weighted_identity(frozen, b.images, b.targets, 1e-8);
  EXPECT_TRUE(rep.pass) << rep.max_abs_diff;
}

TEST(WeightedIdentity, WrongConfigurationIsRejected) {
  const Batch b = make_batch(10, 1, 32, LevelStrides{4, 8, 16});
  EXPECT_THROW(verify_weighted_identity(Detector<double>(ModelConfig{}, 1), b.images, b.targets, 1e-8),
               ConfigurationError);
  const Batch bi = make_batch(10, 1, 32, LevelStrides{4, 4, 4});
  EXPECT_THROW(verify_weighted_identity(Detector<double>(identity_config(FusionMode::asff, false), 1), bi.images,
                                        bi.targets, 1e-8),
               ConfigurationError);
  EXPECT_THROW(verify_weighted_identity(Detector<double>(identity_config(FusionMode::sum, true), 1), bi.images,
                                        bi.targets, 1e-8),
               ConfigurationError);
}

TEST(Residuals, ZeroLambdaHasNoLambdaPathResidual) {
  ModelConfig cfg;
  cfg.channels = {6, 6, 6};
  Detector<double> model(cfg, 11);
  const Batch b = make_batch(11, 2, 32, model.strides());
  const auto r = coefficient_residuals(model, b.images, b.targets);
  EXPECT_EQ(r.lambda_path, 0.0);
  EXPECT_TRUE(std::isfinite(r.resize));
  EXPECT_GT(r.resize, 0.0);
}

TEST(Residuals, LiveLambdaPathIsReported) {
  ModelConfig cfg;
  Detector<double> model(cfg, 12);
  randomize_lambda(model, 13, 0.5);
  const Batch b = make_batch(12, 2, 32, model.strides());
  const auto r = coefficient_residuals(model, b.images, b.targets);
  EXPECT_GT(r.lambda_path, 0.0);
  EXPECT_TRUE(std::isnan(r.resize));
  cfg.fusion = FusionMode::sum;
  EXPECT_THROW(coefficient_residuals(Detector<double>(cfg, 1), b.images, b.targets), ConfigurationError);
}

TEST(ConflictReport, AveragesOverFirstLevelPositives) {
  Detector<double> model(ModelConfig{}, 14);
  randomize_lambda(model, 15, 0.5);
  const Batch b = make_batch(13, 4, 64, model.strides());
  const auto maps = decompose_all(model, b.images, b.targets);
  const auto rep = conflict_report(maps, b.targets);
  EXPECT_EQ(rep.positive_count, b.targets.positives[0].size());
  EXPECT_EQ(rep.map_shape, (Shape{4, 1, 16, 16}));
  double acc = 0;
  for (const auto& p : b.targets.positives[0]) acc += conflict_metric(decomposition_at(maps, {p.batch, p.cell.row, p.cell.col}));
  ASSERT_GT(rep.positive_count, 0u);
  EXPECT_NEAR(rep.mean_conflict, acc / static_cast<double>(rep.positive_count), 1e-15);
  for (double c : rep.per_position_conflict) {
    EXPECT_GE(c, 0.0);
    EXPECT_LE(c, 1.0);
  }
}

TEST(ConflictCsv, OneRowPerFirstLevelPosition) {
  Detector<double> model(ModelConfig{}, 16);
  const Batch b = make_batch(14, 2, 32, model.strides());
  const auto maps = decompose_all(model, b.images, b.targets);
  std::ostringstream out;
  write_conflict_csv(out, maps, 1);
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, kConflictCsvHeader);
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 9);
  }
  EXPECT_EQ(rows, 8u * 8u);
}
