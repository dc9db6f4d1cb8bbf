#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "asff/errors.hpp"
#include "asff/tensor.hpp"

namespace asff {

// Gradient injected at an arbitrary tensor for a seeded backward pass.
template <typename T>
struct Seed {
  Tensor<T> tensor;
  std::vector<T> grad;
};

// Reverse-mode tape. Ops append nodes in execution order, so the node list
// is already topologically sorted; backward walks it once in reverse.
//
// A graph belongs to one thread for its whole life.
template <typename T>
class Graph {
 public:
  // Receives the output gradient; accumulates into the inputs' grad buffers.
  using BackwardFn = std::function<void(std::span<const T> grad_out)>;

  struct Node {
    std::string_view op;
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    BackwardFn backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) noexcept = default;
  Graph& operator=(Graph&&) noexcept = default;

  // Records `output` as produced by `op` when any input takes part in
  // differentiation. Returns `output` either way.
  Tensor<T> record(std::string_view op, std::vector<Tensor<T>> inputs, Tensor<T> output,
                   BackwardFn backward) {
    bool needs_grad = false;
    if (recording_) {
      for (const auto& in : inputs) needs_grad = needs_grad || in.requires_grad();
    }
    if (!needs_grad) return output;
    output.set_requires_grad(true);
    output.mark_produced();
    nodes_.push_back(Node{op, std::move(inputs), output, std::move(backward)});
    return output;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  // With recording off, ops compute values only (inference).
  void set_recording(bool on) noexcept { recording_ = on; }
  bool recording() const noexcept { return recording_; }
  const std::vector<Node>& nodes() const noexcept { return nodes_; }

  // d(loss)/d(everything). `loss` must be a (1,1,1,1) tensor.
  void backward(const Tensor<T>& loss) {
    if (!loss.defined() || !loss.shape().is_scalar()) {
      throw InvalidArgument("backward: loss must be a scalar of shape (1,1,1,1), got " +
                            (loss.defined() ? loss.shape().str() : std::string("undefined")));
    }
    std::vector<Seed<T>> seeds;
    seeds.push_back(Seed<T>{loss, std::vector<T>{T(1)}});
    backward(seeds);
  }

  // Backward from arbitrary seeds. Intermediate grads are reset first; leaf
  // grads accumulate across calls. Every requires_grad leaf that appears in
  // the graph ends up with a grad buffer, zero when unreachable from a seed.
  void backward(std::span<const Seed<T>> seeds) {
    for (auto& node : nodes_) node.output.release_grad();
    for (const auto& seed : seeds) {
      if (seed.grad.size() != seed.tensor.size()) {
        throw DimensionError("backward", "seed",
                             "seed gradient has " + std::to_string(seed.grad.size()) +
                                 " values for tensor of shape " + seed.tensor.shape().str());
      }
      Tensor<T> target = seed.tensor;
      auto buf = target.grad_buffer();
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += seed.grad[i];
    }
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (!it->output.has_grad()) continue;
      it->backward(std::as_const(it->output).grad());
    }
    for (auto& node : nodes_) {
      for (auto& in : node.inputs) {
        if (!in.defined() || !in.is_leaf() || !in.requires_grad()) continue;
        auto g = in.grad_buffer();
        for (T v : g) {
          if (!std::isfinite(v)) {
            throw NumericError("backward: non-finite gradient reached a leaf of op " +
                               std::string(node.op));
          }
        }
      }
    }
  }

  void clear() { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
  bool recording_ = true;
};

}  // namespace asff
