#pragma once

// Feature resizing between pyramid levels.
//
// Level indexing: index 0 is level 1, the HIGHEST resolution. Each step up in
// index halves the spatial size. So "source coarser than target" means
// source index > target index and calls for upsampling.
//
// Rules for bringing x^n to level l (n != l):
//   coarser by 2^k : 1x1 conv to C_l, then one interpolation by 2^k
//                    (a single x4 call for k == 2, not two x2 calls)
//   finer by 2     : 3x3 conv, stride 2, pad 1
//   finer by 4     : 2x2 max-pool stride 2, then the finer-by-2 conv

#include <array>
#include <cstddef>
#include <string>

#include "asff/errors.hpp"
#include "asff/graph.hpp"
#include "asff/ops.hpp"
#include "asff/params.hpp"
#include "asff/tensor.hpp"

namespace asff {

inline constexpr std::size_t kLevels = 3;

using LevelChannels = std::array<std::size_t, kLevels>;

enum class ResizeMode {
  real,
  // Test configuration: every level has the same shape and x^{n->l} = x^n.
  identity,
};

enum class Interpolation { bilinear, nearest };

template <typename T>
struct PyramidFeatures {
  std::array<Tensor<T>, kLevels> levels;
  // resized[target][source] is x^{source->target}; resized[l][l] is levels[l].
  std::array<std::array<Tensor<T>, kLevels>, kLevels> resized;
};

// Conv weights for one (source -> target) branch. Undefined for l == n and in
// identity mode.
template <typename T>
struct ResizeBranch {
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
struct ResizeParams {
  ResizeMode mode = ResizeMode::real;
  Interpolation interpolation = Interpolation::bilinear;
  LevelChannels channels{};
  // branch[source][target]
  std::array<std::array<ResizeBranch<T>, kLevels>, kLevels> branch;

  void append_to(ParamList<T>& params) const {
    for (std::size_t s = 0; s < kLevels; ++s) {
      for (std::size_t t = 0; t < kLevels; ++t) {
        const auto& b = branch[s][t];
        if (!b.weight.defined()) continue;
        const std::string name = "resize." + std::to_string(s + 1) + "to" + std::to_string(t + 1);
        params.push_back({name + ".weight", b.weight});
        params.push_back({name + ".bias", b.bias});
      }
    }
  }
};

inline std::size_t level_ratio(std::size_t from, std::size_t to) {
  const std::size_t d = from > to ? from - to : to - from;
  return std::size_t{1} << d;
}

template <typename T>
ResizeParams<T> make_resize_params(const LevelChannels& channels, ResizeMode mode,
                                   Interpolation interpolation, Rng& rng) {
  ResizeParams<T> p;
  p.mode = mode;
  p.interpolation = interpolation;
  p.channels = channels;
  if (mode == ResizeMode::identity) {
    for (std::size_t l = 1; l < kLevels; ++l) {
      if (channels[l] != channels[0]) {
        throw ConfigurationError("identity resize requires equal channel counts at every level");
      }
    }
    return p;
  }
  for (std::size_t s = 0; s < kLevels; ++s) {
    for (std::size_t t = 0; t < kLevels; ++t) {
      if (s == t) continue;
      const std::size_t k = s > t ? 1 : 3;
      p.branch[s][t].weight = msra_conv_weight<T>(rng, channels[t], channels[s], k);
      p.branch[s][t].bias = bias_param<T>(channels[t]);
    }
  }
  return p;
}

// Brings x^source to the channel count and resolution of level `target`.
template <typename T>
Tensor<T> resize_to_level(Graph<T>& graph, const Tensor<T>& x, std::size_t source, std::size_t target,
                          const ResizeParams<T>& params) {
  if (source >= kLevels || target >= kLevels) {
    throw RangeError("resize_to_level: level index out of range (" + std::to_string(source) + " -> " +
                     std::to_string(target) + ")");
  }
  if (x.shape().c != params.channels[source]) {
    throw DimensionError("resize_to_level", "C",
                         "input claims level " + std::to_string(source + 1) + " with " +
                             std::to_string(params.channels[source]) + " channels, got " +
                             std::to_string(x.shape().c));
  }
  if (source == target || params.mode == ResizeMode::identity) return x;

  const auto& branch = params.branch[source][target];
  const std::size_t ratio = level_ratio(source, target);
  if (source > target) {
    Tensor<T> compressed = conv2d(graph, x, branch.weight, branch.bias, 1, 0);
    return params.interpolation == Interpolation::bilinear ? interpolate_bilinear(graph, compressed, ratio)
                                                           : interpolate_nearest(graph, compressed, ratio);
  }
  if (x.shape().h % ratio != 0 || x.shape().w % ratio != 0) {
    throw DimensionError("resize_to_level", x.shape().h % ratio != 0 ? "H" : "W",
                         "level " + std::to_string(source + 1) + " size " + x.shape().str() +
                             " is not divisible by the downsampling ratio " + std::to_string(ratio));
  }
  Tensor<T> in = ratio == 4 ? maxpool2(graph, x) : x;
  return conv2d(graph, in, branch.weight, branch.bias, 2, 1);
}

// Checks level shapes, then fills every x^{n->l}.
template <typename T>
PyramidFeatures<T> resize_pyramid(Graph<T>& graph, const std::array<Tensor<T>, kLevels>& levels,
                                  const ResizeParams<T>& params) {
  for (std::size_t l = 1; l < kLevels; ++l) {
    const Shape& fine = levels[l - 1].shape();
    const Shape& coarse = levels[l].shape();
    detail::expect_axis("resize_pyramid", "N", coarse.n, fine.n);
    const std::size_t r = params.mode == ResizeMode::identity ? 1 : 2;
    detail::expect_axis("resize_pyramid", "H", coarse.h * r, fine.h);
    detail::expect_axis("resize_pyramid", "W", coarse.w * r, fine.w);
  }
  PyramidFeatures<T> pyr;
  pyr.levels = levels;
  for (std::size_t t = 0; t < kLevels; ++t) {
    for (std::size_t s = 0; s < kLevels; ++s) {
      pyr.resized[t][s] = resize_to_level(graph, levels[s], s, t, params);
    }
  }
  return pyr;
}

}  // namespace asff
