#pragma once

// Adaptive spatial fusion and the baseline fusions it is compared against.
//
// For target level l, with x^{n->l} the resized inputs:
//   lambda^{n,l} = conv1x1_{n,l}(x^{n->l})            one scalar map per source
//   w^{n->l}     = softmax over n of lambda^{.,l}      per position, sums to 1
//   y^l          = sum_n w^{n->l} * x^{n->l}           w broadcast over channels

#include <array>
#include <cstddef>
#include <span>
#include <string>

#include "asff/errors.hpp"
#include "asff/graph.hpp"
#include "asff/ops.hpp"
#include "asff/params.hpp"
#include "asff/pyramid.hpp"
#include "asff/tensor.hpp"

namespace asff {

enum class FusionMode { asff, sum, concat };

inline std::string to_string(FusionMode m) {
  switch (m) {
    case FusionMode::asff: return "asff";
    case FusionMode::sum: return "sum";
    case FusionMode::concat: return "concat";
  }
  return "?";
}

template <typename T>
struct FusionWeights {
  Tensor<T> lambda;   // (N, 3, H_l, W_l), pre-softmax
  Tensor<T> weights;  // (N, 3, H_l, W_l), channel n is w^{n->l}
};

// The 1x1 convs producing lambda. weight[l][n] is (1, C_l, 1, 1).
// Zero-initialised, so an untrained model fuses with uniform 1/3 weights.
template <typename T>
struct LambdaParams {
  std::array<std::array<Tensor<T>, kLevels>, kLevels> weight;
  std::array<std::array<Tensor<T>, kLevels>, kLevels> bias;
};

// 1x1 conv mapping the 3*C_l concatenation back to C_l, per target level.
template <typename T>
struct ConcatParams {
  std::array<Tensor<T>, kLevels> weight;
  std::array<Tensor<T>, kLevels> bias;
};

template <typename T>
struct FusionParams {
  FusionMode mode = FusionMode::asff;
  LambdaParams<T> lambda;
  ConcatParams<T> concat;

  bool has_concat() const { return concat.weight[0].defined(); }

  void append_to(ParamList<T>& params) const {
    for (std::size_t l = 0; l < kLevels; ++l) {
      const std::string lvl = "fusion.l" + std::to_string(l + 1);
      if (mode == FusionMode::asff) {
        for (std::size_t n = 0; n < kLevels; ++n) {
          params.push_back({lvl + ".lambda" + std::to_string(n + 1) + ".weight", lambda.weight[l][n]});
          params.push_back({lvl + ".lambda" + std::to_string(n + 1) + ".bias", lambda.bias[l][n]});
        }
      } else if (mode == FusionMode::concat) {
        params.push_back({lvl + ".concat.weight", concat.weight[l]});
        params.push_back({lvl + ".concat.bias", concat.bias[l]});
      }
    }
  }
};

template <typename T>
FusionParams<T> make_fusion_params(FusionMode mode, const LevelChannels& channels, Rng& rng) {
  FusionParams<T> p;
  p.mode = mode;
  if (mode == FusionMode::asff) {
    for (std::size_t l = 0; l < kLevels; ++l) {
      for (std::size_t n = 0; n < kLevels; ++n) {
        p.lambda.weight[l][n] = zero_param<T>(Shape{1, channels[l], 1, 1});
        p.lambda.bias[l][n] = zero_param<T>(Shape{1, 1, 1, 1});
      }
    }
  } else if (mode == FusionMode::concat) {
    for (std::size_t l = 0; l < kLevels; ++l) {
      p.concat.weight[l] = msra_conv_weight<T>(rng, channels[l], 3 * channels[l], 1);
      p.concat.bias[l] = bias_param<T>(channels[l]);
    }
  }
  return p;
}

namespace detail {

template <typename T>
void expect_fusion_inputs(const char* op, std::span<const Tensor<T>> resized) {
  if (resized.size() != kLevels) {
    throw DimensionError(op, "sources", "expected 3 resized inputs, got " + std::to_string(resized.size()));
  }
  const Shape& a = resized[0].shape();
  for (const auto& r : resized) {
    expect_axis(op, "N", r.shape().n, a.n);
    expect_axis(op, "H", r.shape().h, a.h);
    expect_axis(op, "W", r.shape().w, a.w);
  }
}

}  // namespace detail

// lambda maps from the raw resized features, then softmax over sources.
// With `detach_weights` the returned weights are constants for backward
// (the lambda path is cut), which is what the coefficient-form gradient analysis
// assumes.
template <typename T>
FusionWeights<T> compute_fusion_weights(Graph<T>& graph, std::span<const Tensor<T>> resized,
                                        const LambdaParams<T>& params, std::size_t level,
                                        bool detach_weights = false) {
  detail::expect_fusion_inputs<T>("compute_fusion_weights", resized);
  if (level >= kLevels) throw RangeError("compute_fusion_weights: level out of range");
  std::array<Tensor<T>, kLevels> maps;
  for (std::size_t n = 0; n < kLevels; ++n) {
    const Tensor<T>& w = params.weight[level][n];
    if (!w.defined()) throw ConfigurationError("compute_fusion_weights: lambda params missing");
    detail::expect_axis("compute_fusion_weights", "C", resized[n].shape().c, w.shape().c);
    maps[n] = conv2d(graph, resized[n], w, params.bias[level][n], 1, 0);
  }
  FusionWeights<T> fw;
  fw.lambda = concat_channels<T>(graph, maps);
  fw.weights = softmax_over_sources(graph, fw.lambda);
  if (detach_weights) fw.weights = detach(fw.weights);
  return fw;
}

// y^l = sum_n w^{n->l} x^{n->l}.
template <typename T>
Tensor<T> fuse(Graph<T>& graph, std::span<const Tensor<T>> resized, const FusionWeights<T>& weights) {
  detail::expect_fusion_inputs<T>("fuse", resized);
  return weighted_sum(graph, weights.weights, resized);
}

template <typename T>
Tensor<T> fuse_baseline(Graph<T>& graph, std::span<const Tensor<T>> resized, FusionMode mode,
                        const ConcatParams<T>* concat, std::size_t level) {
  detail::expect_fusion_inputs<T>("fuse_baseline", resized);
  switch (mode) {
    case FusionMode::sum:
      return add(graph, add(graph, resized[0], resized[1]), resized[2]);
    case FusionMode::concat: {
      if (concat == nullptr || level >= kLevels || !concat->weight[level].defined()) {
        throw ConfigurationError("fuse_baseline: concat mode needs the 1x1 restore conv params");
      }
      Tensor<T> cat = concat_channels(graph, resized);
      return conv2d(graph, cat, concat->weight[level], concat->bias[level], 1, 0);
    }
    case FusionMode::asff:
      break;
  }
  throw ConfigurationError("fuse_baseline: mode must be sum or concat");
}

}  // namespace asff
