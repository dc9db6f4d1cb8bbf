#pragma once

// Per-level decomposition of dL/dx^1 and cross-level conflict.
//
// x^1 here is the level-1 feature as consumed by fusion (the model's tap), so
// its gradient is exactly the sum of the three fusion paths:
//   dL/dx^1_ij = g_1 + g_2 + g_3,   g_l = contribution flowing back from y^l.
// Each g_l comes from a backward pass seeded only with dL/dy^l. In the
// identity-resize, detached-weight configuration the chain rule gives
//   g_l = w^{1->l}_ij * dL/dy^l_ij
// exactly, and in sum fusion g_l = dL/dy^l_ij.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstddef>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "asff/errors.hpp"
#include "asff/graph.hpp"
#include "asff/loss.hpp"
#include "asff/model.hpp"
#include "asff/targets.hpp"
#include "asff/tensor.hpp"

namespace asff {

struct Position {
  std::size_t batch = 0;
  std::size_t row = 0;
  std::size_t col = 0;
};

// Whole-map decomposition for one batch.
template <typename T>
struct DecompositionMaps {
  Shape shape;                                      // shape of x^1
  std::array<std::vector<T>, kLevels> contribution; // g_l, laid out like x^1
  std::vector<T> total;                             // dL/dx^1
  std::array<Tensor<T>, kLevels> output_grad;       // dL/dy^l
  std::array<Tensor<T>, kLevels> weights;           // asff only: (N,3,H_l,W_l)
  FusionMode fusion = FusionMode::asff;
  ResizeMode resize = ResizeMode::real;
};

template <typename T>
struct GradientDecomposition {
  Position position;
  std::array<std::vector<T>, kLevels> contribution;  // per channel
  std::vector<T> total;
  // w^{1->l} at the position mapped to level l. 1 for sum fusion, NaN for
  // concat (no scalar coefficient exists).
  std::array<double, kLevels> weight{};
};

// Maps a level-1 cell to the cell of level l covering it.
inline Position map_to_level(const Position& p, std::size_t level, ResizeMode resize) {
  if (resize == ResizeMode::identity) return p;
  return {p.batch, p.row >> level, p.col >> level};
}

template <typename T>
DecompositionMaps<T> decompose_all(const Detector<T>& model, const Tensor<T>& images, const TargetMaps<T>& targets,
                                   const LossConfig& loss_cfg = {}) {
  Graph<T> graph;
  ForwardResult<T> fr = model.forward(graph, images);
  Tensor<T> loss = detection_loss(graph, fr.preds, targets, loss_cfg);
  graph.backward(loss);

  DecompositionMaps<T> out;
  out.shape = fr.taps[0].shape();
  out.fusion = model.config().fusion;
  out.resize = model.config().resize;
  const auto read_tap = [&] {
    const Tensor<T>& tap = fr.taps[0];
    if (!tap.has_grad()) return std::vector<T>(tap.size(), T(0));
    return std::vector<T>(tap.grad().begin(), tap.grad().end());
  };
  out.total = read_tap();
  for (std::size_t l = 0; l < kLevels; ++l) {
    const Tensor<T>& y = fr.fused[l];
    Tensor<T> g(y.shape());
    if (y.has_grad()) std::copy(y.grad().begin(), y.grad().end(), g.data().begin());
    out.output_grad[l] = g;
    if (fr.weights[l]) out.weights[l] = fr.weights[l]->weights;
  }
  for (std::size_t l = 0; l < kLevels; ++l) {
    std::vector<Seed<T>> seeds;
    seeds.push_back({fr.fused[l], std::vector<T>(out.output_grad[l].data().begin(), out.output_grad[l].data().end())});
    graph.backward(seeds);
    out.contribution[l] = read_tap();
  }
  return out;
}

template <typename T>
GradientDecomposition<T> decomposition_at(const DecompositionMaps<T>& maps, const Position& p) {
  const Shape& s = maps.shape;
  if (p.batch >= s.n || p.row >= s.h || p.col >= s.w) {
    throw RangeError("decompose_gradient: position (" + std::to_string(p.batch) + "," + std::to_string(p.row) + "," +
                     std::to_string(p.col) + ") outside level-1 map " + s.str());
  }
  GradientDecomposition<T> d;
  d.position = p;
  d.total.resize(s.c);
  for (auto& c : d.contribution) c.resize(s.c);
  for (std::size_t c = 0; c < s.c; ++c) {
    const std::size_t idx = ((p.batch * s.c + c) * s.h + p.row) * s.w + p.col;
    d.total[c] = maps.total[idx];
    for (std::size_t l = 0; l < kLevels; ++l) d.contribution[l][c] = maps.contribution[l][idx];
  }
  for (std::size_t l = 0; l < kLevels; ++l) {
    if (maps.fusion == FusionMode::sum) {
      d.weight[l] = 1.0;
    } else if (maps.fusion == FusionMode::asff) {
      const Position q = map_to_level(p, l, maps.resize);
      d.weight[l] = static_cast<double>(maps.weights[l].at(q.batch, 0, q.row, q.col));
    } else {
      d.weight[l] = std::numeric_limits<double>::quiet_NaN();
    }
  }
  return d;
}

// One position. Recomputes the whole-map decomposition; use decompose_all
// plus decomposition_at when many positions are needed.
template <typename T>
GradientDecomposition<T> decompose_gradient(const Detector<T>& model, const Tensor<T>& images,
                                            const TargetMaps<T>& targets, const Position& p,
                                            const LossConfig& loss_cfg = {}) {
  const Shape probe = Shape{images.shape().n, 0, images.shape().h / 4, images.shape().w / 4};
  if (p.batch >= probe.n || p.row >= probe.h || p.col >= probe.w) {
    throw RangeError("decompose_gradient: position outside level-1 map");
  }
  return decomposition_at(decompose_all(model, images, targets, loss_cfg), p);
}

// 1 - sum_c |sum_l g_l,c| / sum_c sum_l |g_l,c|. 0 means the level
// contributions agree in sign everywhere, 1 means they cancel completely.
// Artifact-defined measure; 0 when everything vanishes.
template <typename T>
double conflict_metric(const std::array<std::vector<T>, kLevels>& contribution) {
  double net = 0;
  double gross = 0;
  const std::size_t channels = contribution[0].size();
  for (std::size_t c = 0; c < channels; ++c) {
    double s = 0;
    for (std::size_t l = 0; l < kLevels; ++l) {
      s += static_cast<double>(contribution[l][c]);
      gross += std::abs(static_cast<double>(contribution[l][c]));
    }
    net += std::abs(s);
  }
  if (gross == 0.0) return 0.0;
  return std::clamp(1.0 - net / gross, 0.0, 1.0);
}

template <typename T>
double conflict_metric(const GradientDecomposition<T>& d) {
  return conflict_metric(d.contribution);
}

struct ConflictReport {
  double mean_conflict = 0;                   // over positives_mask
  Shape map_shape;                            // (N,1,H_1,W_1)
  std::vector<double> per_position_conflict;  // laid out like map_shape
  std::vector<bool> positives_mask;
  std::size_t positive_count = 0;
};

template <typename T>
ConflictReport conflict_report(const DecompositionMaps<T>& maps, const TargetMaps<T>& targets) {
  ConflictReport r;
  const Shape& s = maps.shape;
  r.map_shape = Shape{s.n, 1, s.h, s.w};
  r.per_position_conflict.assign(r.map_shape.size(), 0.0);
  r.positives_mask.assign(r.map_shape.size(), false);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < s.h; ++i) {
      for (std::size_t j = 0; j < s.w; ++j) {
        r.per_position_conflict[(n * s.h + i) * s.w + j] = conflict_metric(decomposition_at(maps, {n, i, j}));
      }
    }
  }
  double acc = 0;
  for (const Positive& p : targets.positives[0]) {
    const std::size_t idx = (p.batch * s.h + p.cell.row) * s.w + p.cell.col;
    r.positives_mask[idx] = true;
    acc += r.per_position_conflict[idx];
    ++r.positive_count;
  }
  r.mean_conflict = r.positive_count ? acc / static_cast<double>(r.positive_count) : 0.0;
  return r;
}

struct WeightedIdentityReport {
  double max_abs_diff = 0;
  bool pass = false;
};

// Checks dL/dx^1_ij == sum_l w^{1->l}_ij dL/dy^l_ij at every level-1
// position and channel. Only meaningful, and only allowed, for asff fusion
// with identity resizing and detached weights.
template <typename T>
WeightedIdentityReport verify_weighted_identity(const Detector<T>& model, const Tensor<T>& images, const TargetMaps<T>& targets, double tol,
                     const LossConfig& loss_cfg = {}) {
  const ModelConfig& cfg = model.config();
  if (cfg.fusion != FusionMode::asff || cfg.resize != ResizeMode::identity || !cfg.detach_weights) {
    throw ConfigurationError(
        "verify_weighted_identity requires asff fusion with identity resizing and detached fusion weights");
  }
  const DecompositionMaps<T> maps = decompose_all(model, images, targets, loss_cfg);
  const Shape& s = maps.shape;
  WeightedIdentityReport rep;
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      for (std::size_t i = 0; i < s.h; ++i) {
        for (std::size_t j = 0; j < s.w; ++j) {
          double predicted = 0;
          for (std::size_t l = 0; l < kLevels; ++l) {
            predicted += static_cast<double>(maps.weights[l].at(n, 0, i, j)) *
                         static_cast<double>(maps.output_grad[l].at(n, c, i, j));
          }
          const double total = static_cast<double>(maps.total[((n * s.c + c) * s.h + i) * s.w + j]);
          rep.max_abs_diff = std::max(rep.max_abs_diff, std::abs(total - predicted));
        }
      }
    }
  }
  rep.pass = rep.max_abs_diff <= tol;
  return rep;
}

// Residuals of the coefficient form under real resizing, split by cause:
//   lambda_path = |total(live weights) - total(detached weights)|
//   resize      = |total(detached) - sum_l w^{1->l} dL/dy^l| (at the mapped
//                 level-l cell; NaN when level channel counts differ)
// Both are max-abs over positions and channels.
struct ResidualReport {
  double lambda_path = 0;
  double resize = std::numeric_limits<double>::quiet_NaN();
};

template <typename T>
ResidualReport coefficient_residuals(const Detector<T>& model, const Tensor<T>& images, const TargetMaps<T>& targets,
                                     const LossConfig& loss_cfg = {}) {
  if (model.config().fusion != FusionMode::asff) {
    throw ConfigurationError("coefficient_residuals requires asff fusion");
  }
  Detector<T> live = model;
  live.config().detach_weights = false;
  Detector<T> frozen = model;
  frozen.config().detach_weights = true;
  const auto a = decompose_all(live, images, targets, loss_cfg);
  const auto b = decompose_all(frozen, images, targets, loss_cfg);
  ResidualReport r;
  for (std::size_t i = 0; i < a.total.size(); ++i) {
    r.lambda_path = std::max(r.lambda_path, std::abs(static_cast<double>(a.total[i]) - static_cast<double>(b.total[i])));
  }
  const Shape& s = b.shape;
  bool same_channels = true;
  for (std::size_t l = 0; l < kLevels; ++l) same_channels = same_channels && b.output_grad[l].shape().c == s.c;
  if (!same_channels) return r;
  double worst = 0;
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      for (std::size_t i = 0; i < s.h; ++i) {
        for (std::size_t j = 0; j < s.w; ++j) {
          double predicted = 0;
          for (std::size_t l = 0; l < kLevels; ++l) {
            const Position q = map_to_level({n, i, j}, l, b.resize);
            predicted += static_cast<double>(b.weights[l].at(n, 0, q.row, q.col)) *
                         static_cast<double>(b.output_grad[l].at(n, c, q.row, q.col));
          }
          worst = std::max(worst, std::abs(static_cast<double>(b.total[((n * s.c + c) * s.h + i) * s.w + j]) - predicted));
        }
      }
    }
  }
  r.resize = worst;
  return r;
}

inline constexpr const char* kConflictCsvHeader = "position_i,position_j,g1_norm,g2_norm,g3_norm,total_norm,conflict,w1,w2,w3";

// One row per level-1 position of batch element `batch`.
template <typename T>
void write_conflict_csv(std::ostream& out, const DecompositionMaps<T>& maps, std::size_t batch = 0) {
  const auto norm = [](const std::vector<T>& v) {
    double s = 0;
    for (T x : v) s += static_cast<double>(x) * static_cast<double>(x);
    return std::sqrt(s);
  };
  const auto fmt = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return std::string(buf);
  };
  out << kConflictCsvHeader << "\n";
  for (std::size_t i = 0; i < maps.shape.h; ++i) {
    for (std::size_t j = 0; j < maps.shape.w; ++j) {
      const auto d = decomposition_at(maps, {batch, i, j});
      out << i << "," << j;
      for (std::size_t l = 0; l < kLevels; ++l) out << "," << fmt(norm(d.contribution[l]));
      out << "," << fmt(norm(d.total)) << "," << fmt(conflict_metric(d));
      for (std::size_t l = 0; l < kLevels; ++l) out << "," << fmt(d.weight[l]);
      out << "\n";
    }
  }
}

}  // namespace asff
