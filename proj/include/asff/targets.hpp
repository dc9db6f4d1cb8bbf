#pragma once

// Heuristic level assignment, center-positive target maps, and the
// adjacent-level ignore regions.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "asff/box.hpp"
#include "asff/errors.hpp"
#include "asff/pyramid.hpp"
#include "asff/scene.hpp"
#include "asff/tensor.hpp"

namespace asff {

using LevelStrides = std::array<std::size_t, kLevels>;

// Upper bounds on sqrt(box area) for levels 1 and 2; anything larger goes to
// level 3. A size exactly on a threshold takes the lower level. The defaults
// sit between the integer side ranges of the three size classes.
struct LevelThresholds {
  double first = 7.5;
  double second = 15.5;
};

inline std::size_t assign_level(const Box& box, const LevelThresholds& t) {
  const double s = std::sqrt(box.area());
  if (s <= t.first) return 0;
  if (s <= t.second) return 1;
  return 2;
}

inline std::vector<std::size_t> assign_levels(std::span<const SceneObject> objects, const LevelThresholds& t) {
  if (!(t.first < t.second)) throw ConfigurationError("assign_levels: thresholds must be strictly increasing");
  std::vector<std::size_t> out;
  out.reserve(objects.size());
  for (const auto& o : objects) out.push_back(assign_level(o.box, t));
  return out;
}

// Grid cell (row, col) containing the box center at a given stride.
struct Cell {
  std::size_t row = 0;
  std::size_t col = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

inline Cell center_cell(const Box& box, std::size_t stride, std::size_t grid_h, std::size_t grid_w) {
  const auto clampi = [](double v, std::size_t hi) {
    return static_cast<std::size_t>(std::clamp(std::floor(v), 0.0, static_cast<double>(hi - 1)));
  };
  return {clampi(box.cy() / static_cast<double>(stride), grid_h), clampi(box.cx() / static_cast<double>(stride), grid_w)};
}

struct Positive {
  std::size_t batch = 0;
  Cell cell;
  std::size_t object = 0;
};

// Per level: objectness (N,1,H,W) in {0,1}, loss weight (N,1,H,W), and the
// ground-truth box corners (N,4,H,W) filled at positive cells only.
template <typename T>
struct TargetMaps {
  LevelStrides strides{};
  std::array<Tensor<T>, kLevels> objectness;
  std::array<Tensor<T>, kLevels> weight;
  std::array<Tensor<T>, kLevels> box;
  std::array<std::vector<Positive>, kLevels> positives;

  std::size_t positive_count() const {
    std::size_t n = 0;
    for (const auto& p : positives) n += p.size();
    return n;
  }
};

template <typename T>
TargetMaps<T> build_targets(std::span<const SyntheticScene> scenes, const LevelStrides& strides,
                            const LevelThresholds& thresholds) {
  if (scenes.empty()) throw InvalidArgument("build_targets: no scenes");
  TargetMaps<T> tm;
  tm.strides = strides;
  const std::size_t n = scenes.size();
  const std::size_t h = scenes[0].height;
  const std::size_t w = scenes[0].width;
  for (std::size_t l = 0; l < kLevels; ++l) {
    if (h % strides[l] != 0 || w % strides[l] != 0) {
      throw DimensionError("build_targets", "H", "image size not divisible by stride " + std::to_string(strides[l]));
    }
    const Shape plane{n, 1, h / strides[l], w / strides[l]};
    tm.objectness[l] = Tensor<T>(plane, T(0));
    tm.weight[l] = Tensor<T>(plane, T(1));
    tm.box[l] = Tensor<T>(Shape{n, 4, plane.h, plane.w}, T(0));
  }
  for (std::size_t b = 0; b < n; ++b) {
    const auto levels = assign_levels(scenes[b].objects, thresholds);
    for (std::size_t i = 0; i < scenes[b].objects.size(); ++i) {
      const Box& box = scenes[b].objects[i].box;
      const std::size_t l = levels[i];
      const Shape& s = tm.objectness[l].shape();
      const Cell c = center_cell(box, strides[l], s.h, s.w);
      if (tm.objectness[l].at(b, 0, c.row, c.col) != T(0)) {
        throw InvalidArgument("build_targets: two objects share a positive cell at level " + std::to_string(l + 1));
      }
      tm.objectness[l].at(b, 0, c.row, c.col) = T(1);
      const std::array<double, 4> corners{box.x1, box.y1, box.x2, box.y2};
      for (std::size_t k = 0; k < 4; ++k) tm.box[l].at(b, k, c.row, c.col) = static_cast<T>(corners[k]);
      tm.positives[l].push_back({b, c, i});
    }
  }
  return tm;
}

enum class IgnoreMode { off, center_only, area };

// epsilon is the ratio of the ignored area's width and height to the
// object's. In area mode, epsilon == 0 ignores nothing.
struct IgnoreConfig {
  double epsilon = 0.0;
  IgnoreMode mode = IgnoreMode::off;
};

inline void validate(const IgnoreConfig& cfg) {
  if (!(cfg.epsilon >= 0.0 && cfg.epsilon <= 1.0)) {
    throw ConfigurationError("epsilon_ignore must lie in [0, 1], got " + std::to_string(cfg.epsilon));
  }
}

// Cells of a (grid_h x grid_w) grid at `stride` that overlap `region` with
// positive area.
inline std::vector<Cell> cells_overlapping(const Box& region, std::size_t stride, std::size_t grid_h,
                                           std::size_t grid_w) {
  std::vector<Cell> out;
  if (region.width() <= 0 || region.height() <= 0) return out;
  const double s = static_cast<double>(stride);
  const auto lo = [&](double v, std::size_t len) {
    return static_cast<std::size_t>(std::clamp(std::floor(v / s), 0.0, static_cast<double>(len)));
  };
  const auto hi = [&](double v, std::size_t len) {
    return static_cast<std::size_t>(std::clamp(std::ceil(v / s), 0.0, static_cast<double>(len)));
  };
  for (std::size_t r = lo(region.y1, grid_h); r < hi(region.y2, grid_h); ++r) {
    for (std::size_t c = lo(region.x1, grid_w); c < hi(region.x2, grid_w); ++c) out.push_back({r, c});
  }
  return out;
}

// Zeroes the loss weight at the levels adjacent to each object's assigned
// level: only the mapped center cell (center_only) or every cell touching the
// box scaled by epsilon about its center (area). The assigned level is never
// touched, nor are cells that are positives themselves.
template <typename T>
void apply_ignore_mask(TargetMaps<T>& targets, std::span<const SyntheticScene> scenes, const IgnoreConfig& cfg,
                       const LevelThresholds& thresholds) {
  validate(cfg);
  if (cfg.mode == IgnoreMode::off) return;
  if (cfg.mode == IgnoreMode::area && cfg.epsilon == 0.0) return;
  for (std::size_t b = 0; b < scenes.size(); ++b) {
    const auto levels = assign_levels(scenes[b].objects, thresholds);
    for (std::size_t i = 0; i < scenes[b].objects.size(); ++i) {
      const Box& box = scenes[b].objects[i].box;
      for (int delta : {-1, 1}) {
        const long adj = static_cast<long>(levels[i]) + delta;
        if (adj < 0 || adj >= static_cast<long>(kLevels)) continue;
        const auto a = static_cast<std::size_t>(adj);
        const Shape& s = targets.weight[a].shape();
        std::vector<Cell> cells;
        if (cfg.mode == IgnoreMode::center_only) {
          cells.push_back(center_cell(box, targets.strides[a], s.h, s.w));
        } else {
          const double hw = 0.5 * cfg.epsilon * box.width();
          const double hh = 0.5 * cfg.epsilon * box.height();
          cells = cells_overlapping(Box{box.cx() - hw, box.cy() - hh, box.cx() + hw, box.cy() + hh},
                                    targets.strides[a], s.h, s.w);
        }
        for (const Cell& c : cells) {
          if (targets.objectness[a].at(b, 0, c.row, c.col) != T(0)) continue;
          targets.weight[a].at(b, 0, c.row, c.col) = T(0);
        }
      }
    }
  }
}

}  // namespace asff
