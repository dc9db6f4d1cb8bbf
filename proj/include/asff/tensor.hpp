#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "asff/errors.hpp"

namespace asff {

struct Shape {
  std::size_t n = 1;
  std::size_t c = 1;
  std::size_t h = 1;
  std::size_t w = 1;

  constexpr std::size_t size() const noexcept { return n * c * h * w; }
  constexpr std::size_t plane() const noexcept { return h * w; }
  constexpr bool is_scalar() const noexcept { return n == 1 && c == 1 && h == 1 && w == 1; }

  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
};

// Dense N-C-H-W array with an optional gradient buffer.
//
// Tensor is a shared handle: copies alias the same storage, and identity
// (`same()`) is what the autograd graph keys on. Forward ops never mutate
// their inputs; only gradients accumulate after creation.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    impl_->shape = shape;
    impl_->data.assign(shape.size(), fill);
    impl_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    if (values.size() != shape.size()) {
      throw DimensionError("Tensor", "data",
                           "expected " + std::to_string(shape.size()) + " values for shape " +
                               shape.str() + ", got " + std::to_string(values.size()));
    }
    impl_->shape = shape;
    impl_->data = std::move(values);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape) { return Tensor(shape, T(0)); }
  static Tensor scalar(T value) { return Tensor(Shape{}, value); }

  bool defined() const noexcept { return impl_ != nullptr; }
  explicit operator bool() const noexcept { return defined(); }

  const Shape& shape() const { return impl_->shape; }
  std::size_t size() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }

  T& operator[](std::size_t i) { return impl_->data[i]; }
  const T& operator[](std::size_t i) const { return impl_->data[i]; }

  std::size_t offset(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    const Shape& s = impl_->shape;
    return ((n * s.c + c) * s.h + y) * s.w + x;
  }
  T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return impl_->data[offset(n, c, y, x)];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return impl_->data[offset(n, c, y, x)];
  }

  // Scalar value of a (1,1,1,1) tensor.
  T item() const {
    if (!shape().is_scalar()) {
      throw InvalidArgument("Tensor::item: tensor of shape " + shape().str() + " is not a scalar");
    }
    return impl_->data[0];
  }

  bool requires_grad() const noexcept { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool flag) { impl_->requires_grad = flag; }

  // Leaves are tensors not produced by a recorded op (inputs, parameters).
  bool is_leaf() const noexcept { return !impl_->has_creator; }
  void mark_produced() { impl_->has_creator = true; }

  bool has_grad() const noexcept { return impl_ && !impl_->grad.empty(); }
  std::span<T> grad() { return impl_->grad; }
  std::span<const T> grad() const { return impl_->grad; }

  // Grad buffer, allocated as zeros on first use.
  std::span<T> grad_buffer() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
    return impl_->grad;
  }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }
  void release_grad() {
    impl_->grad.clear();
    impl_->grad.shrink_to_fit();
  }

  bool same(const Tensor& other) const noexcept { return impl_ == other.impl_; }
  const void* id() const noexcept { return impl_.get(); }

  // Deep copy of values (no grad, no graph linkage).
  Tensor clone() const {
    Tensor out(shape(), std::vector<T>(impl_->data));
    return out;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> values(impl_->data.size());
    std::transform(impl_->data.begin(), impl_->data.end(), values.begin(),
                   [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape(), std::move(values), requires_grad());
  }

  bool all_finite() const {
    return std::all_of(impl_->data.begin(), impl_->data.end(),
                       [](T v) { return std::isfinite(v); });
  }

 private:
  struct Impl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    bool has_creator = false;
  };
  std::shared_ptr<Impl> impl_;
};

}  // namespace asff
