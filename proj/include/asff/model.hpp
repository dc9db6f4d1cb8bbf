#pragma once

// Desk-scale three-level detector:
//   backbone  stem 3x3/2 -> stage 3x3/2 (level 1, stride 4)
//             -> stage 3x3/2 (level 2, stride 8) -> stage 3x3/2 (level 3, stride 16)
//   fusion    every level gets x^{1->l}, x^{2->l}, x^{3->l}, fused by asff / sum / concat
//   heads     per level 3x3 conv + leaky, then 1x1 conv to 5 outputs
// In identity-resize mode the two upper stages keep stride 1, so all levels
// share one resolution (stride 4) and channel count.

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>

#include "asff/errors.hpp"
#include "asff/fusion.hpp"
#include "asff/graph.hpp"
#include "asff/loss.hpp"
#include "asff/ops.hpp"
#include "asff/params.hpp"
#include "asff/pyramid.hpp"
#include "asff/targets.hpp"
#include "asff/tensor.hpp"

namespace asff {

struct ModelConfig {
  std::size_t in_channels = 1;
  std::size_t stem_channels = 8;
  LevelChannels channels{32, 16, 8};
  FusionMode fusion = FusionMode::asff;
  ResizeMode resize = ResizeMode::real;
  Interpolation interpolation = Interpolation::bilinear;
  // Analysis switch: fusion weights become constants for backward.
  bool detach_weights = false;
  // Initial objectness bias, a low prior for the rare positive cells.
  double objectness_prior = -4.0;

  LevelStrides strides() const {
    return resize == ResizeMode::identity ? LevelStrides{4, 4, 4} : LevelStrides{4, 8, 16};
  }
};

inline void validate(const ModelConfig& cfg) {
  if (cfg.in_channels == 0 || cfg.stem_channels == 0) throw ConfigurationError("model channel counts must be positive");
  for (std::size_t c : cfg.channels) {
    if (c == 0) throw ConfigurationError("model.channels entries must be positive");
  }
  if (cfg.resize == ResizeMode::identity) {
    if (cfg.channels[1] != cfg.channels[0] || cfg.channels[2] != cfg.channels[0]) {
      throw ConfigurationError("identity resize needs equal channel counts at all levels");
    }
  }
}

template <typename T>
struct ConvParam {
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
struct ForwardResult {
  // Level features as seen by the fusion stage (their grads are dL/dx^l
  // through fusion only, not through the backbone).
  std::array<Tensor<T>, kLevels> taps;
  PyramidFeatures<T> pyramid;
  std::array<std::optional<FusionWeights<T>>, kLevels> weights;
  std::array<Tensor<T>, kLevels> fused;
  std::array<Tensor<T>, kLevels> preds;
};

template <typename T>
class Detector {
 public:
  Detector() = default;

  Detector(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    validate(cfg_);
    Rng rng(seed);
    const auto conv = [&](std::size_t cout, std::size_t cin, std::size_t k) {
      return ConvParam<T>{msra_conv_weight<T>(rng, cout, cin, k), bias_param<T>(cout)};
    };
    stem_ = conv(cfg_.stem_channels, cfg_.in_channels, 3);
    std::size_t prev = cfg_.stem_channels;
    for (std::size_t l = 0; l < kLevels; ++l) {
      stages_[l] = conv(cfg_.channels[l], prev, 3);
      prev = cfg_.channels[l];
    }
    resize_ = make_resize_params<T>(cfg_.channels, cfg_.resize, cfg_.interpolation, rng);
    fusion_ = make_fusion_params<T>(cfg_.fusion, cfg_.channels, rng);
    for (std::size_t l = 0; l < kLevels; ++l) {
      head_hidden_[l] = conv(cfg_.channels[l], cfg_.channels[l], 3);
      head_out_[l] = conv(kHeadChannels, cfg_.channels[l], 1);
      head_out_[l].bias[0] = static_cast<T>(cfg_.objectness_prior);
    }
  }

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& config() { return cfg_; }
  LevelStrides strides() const { return cfg_.strides(); }

  ResizeParams<T>& resize_params() { return resize_; }
  FusionParams<T>& fusion_params() { return fusion_; }
  const FusionParams<T>& fusion_params() const { return fusion_; }

  // Fixed order; names are stable across runs.
  ParamList<T> parameters() const {
    ParamList<T> out;
    const auto push = [&](const std::string& name, const ConvParam<T>& p) {
      out.push_back({name + ".weight", p.weight});
      out.push_back({name + ".bias", p.bias});
    };
    push("backbone.stem", stem_);
    for (std::size_t l = 0; l < kLevels; ++l) push("backbone.stage" + std::to_string(l + 1), stages_[l]);
    resize_.append_to(out);
    fusion_.append_to(out);
    for (std::size_t l = 0; l < kLevels; ++l) {
      push("head.l" + std::to_string(l + 1) + ".hidden", head_hidden_[l]);
      push("head.l" + std::to_string(l + 1) + ".out", head_out_[l]);
    }
    return out;
  }

  // The lambda-producing convs only (Phi).
  ParamList<T> fusion_parameters() const {
    ParamList<T> out;
    fusion_.append_to(out);
    return out;
  }

  ForwardResult<T> forward(Graph<T>& graph, const Tensor<T>& images) const {
    if (images.shape().c != cfg_.in_channels) {
      throw DimensionError("Detector::forward", "C",
                           "expected " + std::to_string(cfg_.in_channels) + " image channels, got " +
                               std::to_string(images.shape().c));
    }
    if (images.shape().h % 16 != 0 || images.shape().w % 16 != 0) {
      throw DimensionError("Detector::forward", images.shape().h % 16 != 0 ? "H" : "W",
                           "image size must be a multiple of 16, got " + images.shape().str());
    }
    ForwardResult<T> r;
    Tensor<T> x = leaky_relu(graph, conv2d(graph, images, stem_.weight, stem_.bias, 2, 1));
    for (std::size_t l = 0; l < kLevels; ++l) {
      const std::size_t stride = (l == 0 || cfg_.resize == ResizeMode::real) ? 2 : 1;
      x = leaky_relu(graph, conv2d(graph, x, stages_[l].weight, stages_[l].bias, stride, 1));
      r.taps[l] = identity(graph, x);
    }
    r.pyramid = resize_pyramid(graph, r.taps, resize_);
    for (std::size_t l = 0; l < kLevels; ++l) {
      std::span<const Tensor<T>> srcs(r.pyramid.resized[l]);
      if (cfg_.fusion == FusionMode::asff) {
        r.weights[l] = compute_fusion_weights(graph, srcs, fusion_.lambda, l, cfg_.detach_weights);
        r.fused[l] = fuse(graph, srcs, *r.weights[l]);
      } else {
        r.fused[l] = fuse_baseline(graph, srcs, cfg_.fusion, &fusion_.concat, l);
      }
      Tensor<T> h = leaky_relu(graph, conv2d(graph, r.fused[l], head_hidden_[l].weight, head_hidden_[l].bias, 1, 1));
      r.preds[l] = conv2d(graph, h, head_out_[l].weight, head_out_[l].bias, 1, 0);
    }
    return r;
  }

  // Same architecture in another scalar type, values converted.
  template <typename U>
  Detector<U> converted() const {
    Detector<U> out(cfg_, 0);
    const ParamList<T> src = parameters();
    ParamList<U> dst = out.parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
      for (std::size_t k = 0; k < src[i].tensor.size(); ++k) {
        dst[i].tensor[k] = static_cast<U>(src[i].tensor[k]);
      }
    }
    return out;
  }

 private:
  ModelConfig cfg_;
  ConvParam<T> stem_;
  std::array<ConvParam<T>, kLevels> stages_;
  ResizeParams<T> resize_;
  FusionParams<T> fusion_;
  std::array<ConvParam<T>, kLevels> head_hidden_;
  std::array<ConvParam<T>, kLevels> head_out_;
};

}  // namespace asff
