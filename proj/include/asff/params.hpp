#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "asff/tensor.hpp"

namespace asff {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

// Ordered parameter registry. Order is the checkpoint and optimizer order.
template <typename T>
using ParamList = std::vector<NamedTensor<T>>;

using Rng = std::mt19937_64;

// MSRA / He init: N(0, 2 / fan_in), fan_in = cin * k * k.
template <typename T>
Tensor<T> msra_conv_weight(Rng& rng, std::size_t cout, std::size_t cin, std::size_t k) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(cin * k * k));
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor<T> w(Shape{cout, cin, k, k}, T(0), true);
  for (auto& v : w.data()) v = static_cast<T>(dist(rng));
  return w;
}

template <typename T>
Tensor<T> zero_param(Shape shape) {
  return Tensor<T>(shape, T(0), true);
}

template <typename T>
Tensor<T> bias_param(std::size_t channels, T fill = T(0)) {
  return Tensor<T>(Shape{1, channels, 1, 1}, fill, true);
}

}  // namespace asff
