#pragma once

// SGD with momentum and weight decay, and the warmup + cosine schedule.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "asff/errors.hpp"
#include "asff/model.hpp"
#include "asff/params.hpp"
#include "asff/tensor.hpp"

namespace asff {

struct ScheduleConfig {
  double lr_max = 0.01;
  double lr_min = 1e-4;
  double warmup_epochs = 2;
  double total_epochs = 30;
};

inline void validate(const ScheduleConfig& cfg) {
  if (!(cfg.lr_min > 0.0) || !(cfg.lr_max >= cfg.lr_min)) {
    throw ConfigurationError("schedule: need lr_max >= lr_min > 0");
  }
  if (!(cfg.warmup_epochs >= 0.0) || !(cfg.warmup_epochs < cfg.total_epochs)) {
    throw ConfigurationError("schedule: need 0 <= warmup_epochs < total_epochs");
  }
}

// Linear 0 -> lr_max over the warmup, then cosine from lr_max down to lr_min
// at total_epochs. `epoch` may be fractional and is clamped to [0, total].
inline double lr_at(double epoch, const ScheduleConfig& cfg) {
  const double e = std::clamp(epoch, 0.0, cfg.total_epochs);
  if (e < cfg.warmup_epochs) return cfg.lr_max * e / cfg.warmup_epochs;
  const double t = e - cfg.warmup_epochs;
  const double span = cfg.total_epochs - cfg.warmup_epochs;
  return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * t / span));
}

struct SgdConfig {
  double momentum = 0.9;
  double weight_decay = 0.0005;
};

// Theta and Phi live in one parameter list and share one optimizer.
template <typename T>
struct TrainState {
  Detector<T> model;
  std::vector<Tensor<T>> velocity;  // parallel to model.parameters()
  std::size_t epoch = 0;
  std::uint64_t seed = 0;
};

template <typename T>
std::vector<Tensor<T>> zero_velocity(const ParamList<T>& params) {
  std::vector<Tensor<T>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.emplace_back(p.tensor.shape(), T(0));
  return out;
}

// v <- momentum v + g + weight_decay p;  p <- p - lr v.
// A parameter without a gradient is treated as having a zero gradient.
// Nothing is modified if any gradient is non-finite.
template <typename T>
void sgd_step(const ParamList<T>& params, std::vector<Tensor<T>>& velocity, double lr, const SgdConfig& cfg = {}) {
  if (velocity.size() != params.size()) {
    throw InvalidArgument("sgd_step: " + std::to_string(velocity.size()) + " velocity buffers for " +
                          std::to_string(params.size()) + " parameters");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Tensor<T>& p = params[k].tensor;
    if (velocity[k].shape() != p.shape()) {
      throw DimensionError("sgd_step", "shape", params[k].name + ": velocity " + velocity[k].shape().str() +
                                                    " vs parameter " + p.shape().str());
    }
    if (!p.has_grad()) continue;
    for (T g : p.grad()) {
      if (!std::isfinite(g)) throw NumericError("sgd_step: non-finite gradient in parameter " + params[k].name);
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor<T> p = params[k].tensor;
    std::span<T> v = velocity[k].data();
    std::span<T> w = p.data();
    const bool has_grad = p.has_grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = has_grad ? static_cast<double>(p.grad()[i]) : 0.0;
      const double vi = cfg.momentum * static_cast<double>(v[i]) + g + cfg.weight_decay * static_cast<double>(w[i]);
      v[i] = static_cast<T>(vi);
      w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * vi);
    }
  }
}

template <typename T>
void zero_grads(const ParamList<T>& params) {
  for (const auto& p : params) {
    Tensor<T> t = p.tensor;
    t.zero_grad();
  }
}

}  // namespace asff
