#pragma once

// Differentiable operators over N-C-H-W tensors. Every op takes the graph it
// records into as its first argument; nothing is recorded when no input
// requires a gradient.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "asff/errors.hpp"
#include "asff/graph.hpp"
#include "asff/tensor.hpp"

namespace asff {

namespace detail {

inline void expect_axis(const char* op, const char* axis, std::size_t got, std::size_t want) {
  if (got != want) {
    throw DimensionError(op, axis,
                         "expected " + std::to_string(want) + ", got " + std::to_string(got));
  }
}

inline void expect_same_shape(const char* op, const Shape& a, const Shape& b) {
  expect_axis(op, "N", b.n, a.n);
  expect_axis(op, "C", b.c, a.c);
  expect_axis(op, "H", b.h, a.h);
  expect_axis(op, "W", b.w, a.w);
}

// Grad buffer of `t` when it takes part in differentiation, else empty.
// Tensor is a handle, so the buffer is shared with every copy of `t`.
template <typename T>
std::span<T> grad_sink(const Tensor<T>& t) {
  if (!t.defined() || !t.requires_grad()) return {};
  Tensor<T> handle = t;
  return handle.grad_buffer();
}

}  // namespace detail

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

struct ConvGeometry {
  std::size_t cin, h, w, k, stride, pad, oh, ow;
  std::size_t rows() const { return cin * k * k; }
  std::size_t cols() const { return oh * ow; }
  bool trivial() const { return k == 1 && stride == 1 && pad == 0; }
};

// Unfolds one image (cin, h, w) into a (cin*k*k, oh*ow) patch matrix.
template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* cols) {
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = cols + ((ci * g.k + ky) * g.k + kx) * g.cols();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          T* dst = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.ow, T(0));
            continue;
          }
          const T* src = image + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters patch-matrix gradients back onto the image.
template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* image) {
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = cols + ((ci * g.k + ky) * g.k + kx) * g.cols();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          T* dst = image + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
          const T* src = row + oy * g.ow;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// 2-D convolution, square kernel k in {1,3}, stride in {1,2}, zero padding.
// weight: (Cout, Cin, k, k); bias: Cout values or undefined.
// Lowered to a patch matrix times the weight matrix per image. Every matrix
// product runs on Eigen-owned (aligned) storage: Eigen's vectorised paths
// pick their summation order from operand alignment, and results must not
// depend on where the heap happened to place a tensor.
template <typename T>
Tensor<T> conv2d(Graph<T>& graph, const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, std::size_t stride, std::size_t pad) {
  const Shape& is = input.shape();
  const Shape& ws = weight.shape();
  if (ws.h != ws.w) throw DimensionError("conv2d", "kernel", "kernel must be square, got " + ws.str());
  const std::size_t k = ws.h;
  if (k != 1 && k != 3) throw InvalidArgument("conv2d: kernel size must be 1 or 3, got " + std::to_string(k));
  if (stride != 1 && stride != 2) {
    throw InvalidArgument("conv2d: stride must be 1 or 2, got " + std::to_string(stride));
  }
  detail::expect_axis("conv2d", "C", is.c, ws.c);
  if (is.h + 2 * pad < k) detail::expect_axis("conv2d", "H", is.h + 2 * pad, k);
  if (is.w + 2 * pad < k) detail::expect_axis("conv2d", "W", is.w + 2 * pad, k);
  if (bias.defined() && bias.size() != ws.n) detail::expect_axis("conv2d", "bias", bias.size(), ws.n);

  const std::size_t cout = ws.n;
  const detail::ConvGeometry geo{is.c, is.h, is.w, k, stride, pad, (is.h + 2 * pad - k) / stride + 1,
                                 (is.w + 2 * pad - k) / stride + 1};
  const auto rows = static_cast<Eigen::Index>(geo.rows());
  const auto ncols = static_cast<Eigen::Index>(geo.cols());
  const auto outc = static_cast<Eigen::Index>(cout);
  Tensor<T> out(Shape{is.n, cout, geo.oh, geo.ow});

  const detail::RowMatrix<T> wm = detail::ConstMatrixMap<T>(weight.data().data(), outc, rows);
  const auto patches = [&input, geo, rows, ncols](std::size_t n, detail::RowMatrix<T>& dst) {
    dst.resize(rows, ncols);
    const T* image = input.data().data() + n * geo.cin * geo.h * geo.w;
    if (geo.trivial()) {
      std::copy(image, image + geo.rows() * geo.cols(), dst.data());
    } else {
      detail::im2col(image, geo, dst.data());
    }
  };

  // Patch matrices are kept for the weight gradient.
  const bool keep_cols = graph.recording() && weight.requires_grad();
  std::vector<detail::RowMatrix<T>> saved(keep_cols ? is.n : 0);
  detail::RowMatrix<T> cols;
  detail::RowMatrix<T> prod;
  for (std::size_t n = 0; n < is.n; ++n) {
    detail::RowMatrix<T>& c = keep_cols ? saved[n] : cols;
    patches(n, c);
    prod.noalias() = wm * c;
    T* o = out.data().data() + n * cout * geo.cols();
    for (std::size_t co = 0; co < cout; ++co) {
      const T b = bias.defined() ? bias[co] : T(0);
      const T* src = prod.data() + co * geo.cols();
      for (std::size_t p = 0; p < geo.cols(); ++p) o[co * geo.cols() + p] = src[p] + b;
    }
  }

  return graph.record(
      "conv2d", {input, weight, bias}, out,
      [input, weight, bias, geo, wm, patches, saved = std::move(saved)](std::span<const T> gy) {
        const Shape& is = input.shape();
        const std::size_t cout = weight.shape().n;
        const auto outc = static_cast<Eigen::Index>(cout);
        const auto ncols = static_cast<Eigen::Index>(geo.cols());
        std::span<T> gx = detail::grad_sink(input);
        std::span<T> gw = detail::grad_sink(weight);
        std::span<T> gb = detail::grad_sink(bias);
        detail::RowMatrix<T> g;
        detail::RowMatrix<T> cols;
        detail::RowMatrix<T> dw;
        detail::RowMatrix<T> dcols;
        if (!gw.empty()) dw = detail::RowMatrix<T>::Zero(outc, wm.cols());
        for (std::size_t n = 0; n < is.n; ++n) {
          const T* gn = gy.data() + n * cout * geo.cols();
          if (!gb.empty()) {
            for (std::size_t co = 0; co < cout; ++co) {
              T acc = T(0);
              for (std::size_t p = 0; p < geo.cols(); ++p) acc += gn[co * geo.cols() + p];
              gb[co] += acc;
            }
          }
          if (gw.empty() && gx.empty()) continue;
          g = detail::ConstMatrixMap<T>(gn, outc, ncols);
          if (!gw.empty()) {
            const detail::RowMatrix<T>* c = &cols;
            if (saved.empty()) {
              patches(n, cols);
            } else {
              c = &saved[n];
            }
            dw.noalias() += g * c->transpose();
          }
          if (!gx.empty()) {
            dcols.noalias() = wm.transpose() * g;
            T* dimage = gx.data() + n * is.c * is.plane();
            if (geo.trivial()) {
              for (std::size_t i = 0; i < geo.rows() * geo.cols(); ++i) dimage[i] += dcols.data()[i];
            } else {
              detail::col2im_add(dcols.data(), geo, dimage);
            }
          }
        }
        if (!gw.empty()) {
          for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += dw.data()[i];
        }
      });
}

namespace detail {

// Per-output-index source taps for one axis of a bilinear resize.
struct LinearTaps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

inline LinearTaps bilinear_taps(std::size_t in_len, std::size_t scale) {
  LinearTaps taps;
  const std::size_t out_len = in_len * scale;
  taps.lo.resize(out_len);
  taps.hi.resize(out_len);
  taps.frac.resize(out_len);
  for (std::size_t d = 0; d < out_len; ++d) {
    double src = (static_cast<double>(d) + 0.5) / static_cast<double>(scale) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in_len - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    taps.lo[d] = lo;
    taps.hi[d] = std::min(lo + 1, in_len - 1);
    taps.frac[d] = src - static_cast<double>(lo);
  }
  return taps;
}

}  // namespace detail

// Bilinear upsample by an integer factor. Source coordinate for output index
// d is (d + 0.5) / scale - 0.5, clamped to the border.
template <typename T>
Tensor<T> interpolate_bilinear(Graph<T>& graph, const Tensor<T>& input, std::size_t scale) {
  if (scale < 2) {
    throw InvalidArgument("interpolate_bilinear: scale must be >= 2, got " + std::to_string(scale));
  }
  const Shape& is = input.shape();
  const Shape os{is.n, is.c, is.h * scale, is.w * scale};
  const auto ty = detail::bilinear_taps(is.h, scale);
  const auto tx = detail::bilinear_taps(is.w, scale);
  Tensor<T> out(os);
  const std::span<const T> x = input.data();
  std::span<T> y = out.data();
  for (std::size_t p = 0; p < is.n * is.c; ++p) {
    const T* xp = x.data() + p * is.plane();
    T* yp = y.data() + p * os.plane();
    for (std::size_t oy = 0; oy < os.h; ++oy) {
      const T fy = static_cast<T>(ty.frac[oy]);
      const T* r0 = xp + ty.lo[oy] * is.w;
      const T* r1 = xp + ty.hi[oy] * is.w;
      for (std::size_t ox = 0; ox < os.w; ++ox) {
        const T fx = static_cast<T>(tx.frac[ox]);
        const T top = (T(1) - fx) * r0[tx.lo[ox]] + fx * r0[tx.hi[ox]];
        const T bot = (T(1) - fx) * r1[tx.lo[ox]] + fx * r1[tx.hi[ox]];
        yp[oy * os.w + ox] = (T(1) - fy) * top + fy * bot;
      }
    }
  }
  return graph.record("interpolate_bilinear", {input}, out,
                      [input, ty, tx, os](std::span<const T> gy) mutable {
                        std::span<T> gx = detail::grad_sink(input);
                        if (gx.empty()) return;
                        const Shape& is = input.shape();
                        for (std::size_t p = 0; p < is.n * is.c; ++p) {
                          T* gp = gx.data() + p * is.plane();
                          const T* go = gy.data() + p * os.plane();
                          for (std::size_t oy = 0; oy < os.h; ++oy) {
                            const T fy = static_cast<T>(ty.frac[oy]);
                            T* r0 = gp + ty.lo[oy] * is.w;
                            T* r1 = gp + ty.hi[oy] * is.w;
                            for (std::size_t ox = 0; ox < os.w; ++ox) {
                              const T fx = static_cast<T>(tx.frac[ox]);
                              const T g = go[oy * os.w + ox];
                              r0[tx.lo[ox]] += (T(1) - fy) * (T(1) - fx) * g;
                              r0[tx.hi[ox]] += (T(1) - fy) * fx * g;
                              r1[tx.lo[ox]] += fy * (T(1) - fx) * g;
                              r1[tx.hi[ox]] += fy * fx * g;
                            }
                          }
                        }
                      });
}

// Nearest-neighbour upsample; configuration alternative to bilinear.
template <typename T>
Tensor<T> interpolate_nearest(Graph<T>& graph, const Tensor<T>& input, std::size_t scale) {
  if (scale < 2) {
    throw InvalidArgument("interpolate_nearest: scale must be >= 2, got " + std::to_string(scale));
  }
  const Shape& is = input.shape();
  const Shape os{is.n, is.c, is.h * scale, is.w * scale};
  Tensor<T> out(os);
  for (std::size_t p = 0; p < is.n * is.c; ++p) {
    for (std::size_t oy = 0; oy < os.h; ++oy) {
      for (std::size_t ox = 0; ox < os.w; ++ox) {
        out[p * os.plane() + oy * os.w + ox] = input[p * is.plane() + (oy / scale) * is.w + ox / scale];
      }
    }
  }
  return graph.record("interpolate_nearest", {input}, out,
                      [input, scale, os](std::span<const T> gy) mutable {
                        std::span<T> gx = detail::grad_sink(input);
                        if (gx.empty()) return;
                        const Shape& is = input.shape();
                        for (std::size_t p = 0; p < is.n * is.c; ++p) {
                          for (std::size_t oy = 0; oy < os.h; ++oy) {
                            for (std::size_t ox = 0; ox < os.w; ++ox) {
                              gx[p * is.plane() + (oy / scale) * is.w + ox / scale] +=
                                  gy[p * os.plane() + oy * os.w + ox];
                            }
                          }
                        }
                      });
}

// 2x2 max pooling with stride 2. Ties go to the lowest flat index.
template <typename T>
Tensor<T> maxpool2(Graph<T>& graph, const Tensor<T>& input) {
  const Shape& is = input.shape();
  if (is.h % 2 != 0 || is.w % 2 != 0) {
    throw InvalidArgument("maxpool2: spatial size must be even, got " + is.str());
  }
  const Shape os{is.n, is.c, is.h / 2, is.w / 2};
  Tensor<T> out(os);
  std::vector<std::size_t> argmax(os.size());
  for (std::size_t p = 0; p < is.n * is.c; ++p) {
    for (std::size_t oy = 0; oy < os.h; ++oy) {
      for (std::size_t ox = 0; ox < os.w; ++ox) {
        const std::size_t base = p * is.plane() + 2 * oy * is.w + 2 * ox;
        const std::size_t cand[4] = {base, base + 1, base + is.w, base + is.w + 1};
        std::size_t best = cand[0];
        for (std::size_t k = 1; k < 4; ++k) {
          if (input[cand[k]] > input[best]) best = cand[k];
        }
        const std::size_t o = p * os.plane() + oy * os.w + ox;
        out[o] = input[best];
        argmax[o] = best;
      }
    }
  }
  return graph.record("maxpool2", {input}, out,
                      [input, argmax = std::move(argmax)](std::span<const T> gy) mutable {
                        std::span<T> gx = detail::grad_sink(input);
                        if (gx.empty()) return;
                        for (std::size_t o = 0; o < gy.size(); ++o) gx[argmax[o]] += gy[o];
                      });
}

// Softmax across the channel axis of an (N, S, H, W) stack, independently at
// every (n, y, x). Max-subtracted for stability.
template <typename T>
Tensor<T> softmax_over_sources(Graph<T>& graph, const Tensor<T>& stack) {
  const Shape& s = stack.shape();
  if (s.c < 2) {
    throw DimensionError("softmax_over_sources", "C", "need at least 2 sources, got " + std::to_string(s.c));
  }
  Tensor<T> out(s);
  const std::size_t plane = s.plane();
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < plane; ++i) {
      const std::size_t base = n * s.c * plane + i;
      T mx = stack[base];
      for (std::size_t c = 1; c < s.c; ++c) mx = std::max(mx, stack[base + c * plane]);
      T denom = 0;
      for (std::size_t c = 0; c < s.c; ++c) {
        const T e = std::exp(stack[base + c * plane] - mx);
        out[base + c * plane] = e;
        denom += e;
      }
      for (std::size_t c = 0; c < s.c; ++c) out[base + c * plane] /= denom;
    }
  }
  return graph.record("softmax_over_sources", {stack}, out,
                      [stack, out](std::span<const T> gy) mutable {
                        std::span<T> gx = detail::grad_sink(stack);
                        if (gx.empty()) return;
                        const Shape& s = stack.shape();
                        const std::size_t plane = s.plane();
                        for (std::size_t n = 0; n < s.n; ++n) {
                          for (std::size_t i = 0; i < plane; ++i) {
                            const std::size_t base = n * s.c * plane + i;
                            T dot = 0;
                            for (std::size_t c = 0; c < s.c; ++c) {
                              dot += out[base + c * plane] * gy[base + c * plane];
                            }
                            for (std::size_t c = 0; c < s.c; ++c) {
                              const std::size_t k = base + c * plane;
                              gx[k] += out[k] * (gy[k] - dot);
                            }
                          }
                        }
                      });
}

template <typename T>
Tensor<T> add(Graph<T>& graph, const Tensor<T>& a, const Tensor<T>& b) {
  detail::expect_same_shape("add", a.shape(), b.shape());
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return graph.record("add", {a, b}, out, [a, b](std::span<const T> gy) mutable {
    for (const Tensor<T>* t : {&a, &b}) {
      std::span<T> g = detail::grad_sink(*t);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
    }
  });
}

template <typename T>
Tensor<T> mul(Graph<T>& graph, const Tensor<T>& a, const Tensor<T>& b) {
  detail::expect_same_shape("mul", a.shape(), b.shape());
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return graph.record("mul", {a, b}, out, [a, b](std::span<const T> gy) mutable {
    std::span<T> ga = detail::grad_sink(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += b[i] * gy[i];
    std::span<T> gb = detail::grad_sink(b);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += a[i] * gy[i];
  });
}

template <typename T>
Tensor<T> scale(Graph<T>& graph, const Tensor<T>& a, T factor) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  return graph.record("scale", {a}, out, [a, factor](std::span<const T> gy) mutable {
    std::span<T> ga = detail::grad_sink(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += factor * gy[i];
  });
}

// out = sum_s weights[:, s] * sources[s]; each weight plane is broadcast
// across the sources' channels.
template <typename T>
Tensor<T> weighted_sum(Graph<T>& graph, const Tensor<T>& weights, std::span<const Tensor<T>> sources) {
  const Shape& ws = weights.shape();
  if (sources.empty()) throw DimensionError("weighted_sum", "sources", "no source tensors");
  detail::expect_axis("weighted_sum", "sources", ws.c, sources.size());
  const Shape& xs = sources[0].shape();
  for (const auto& src : sources) detail::expect_same_shape("weighted_sum", xs, src.shape());
  detail::expect_axis("weighted_sum", "N", ws.n, xs.n);
  detail::expect_axis("weighted_sum", "H", ws.h, xs.h);
  detail::expect_axis("weighted_sum", "W", ws.w, xs.w);

  const std::size_t plane = xs.plane();
  Tensor<T> out(xs);
  for (std::size_t s = 0; s < sources.size(); ++s) {
    const Tensor<T>& src = sources[s];
    for (std::size_t n = 0; n < xs.n; ++n) {
      const T* wp = weights.data().data() + (n * ws.c + s) * plane;
      for (std::size_t c = 0; c < xs.c; ++c) {
        const std::size_t base = (n * xs.c + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          if (s == 0) {
            out[base + i] = wp[i] * src[base + i];
          } else {
            out[base + i] += wp[i] * src[base + i];
          }
        }
      }
    }
  }

  std::vector<Tensor<T>> inputs{weights};
  inputs.insert(inputs.end(), sources.begin(), sources.end());
  return graph.record("weighted_sum", inputs, out, [inputs](std::span<const T> gy) mutable {
    Tensor<T>& weights = inputs[0];
    const Shape& ws = weights.shape();
    const Shape& xs = inputs[1].shape();
    const std::size_t plane = xs.plane();
    std::span<T> gw = detail::grad_sink(weights);
    for (std::size_t s = 0; s < ws.c; ++s) {
      Tensor<T>& src = inputs[s + 1];
      std::span<T> gx = detail::grad_sink(src);
      for (std::size_t n = 0; n < xs.n; ++n) {
        const std::size_t wbase = (n * ws.c + s) * plane;
        for (std::size_t c = 0; c < xs.c; ++c) {
          const std::size_t base = (n * xs.c + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            if (!gx.empty()) gx[base + i] += weights[wbase + i] * gy[base + i];
            if (!gw.empty()) gw[wbase + i] += src[base + i] * gy[base + i];
          }
        }
      }
    }
  });
}

// Reduction to a (1,1,1,1) scalar.
template <typename T>
Tensor<T> sum_all(Graph<T>& graph, const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  return graph.record("sum_all", {a}, out, [a](std::span<const T> gy) mutable {
    std::span<T> ga = detail::grad_sink(a);
    for (auto& g : ga) g += gy[0];
  });
}

// Stack along the channel axis.
template <typename T>
Tensor<T> concat_channels(Graph<T>& graph, std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_channels", "C", "no inputs");
  const Shape& first = parts[0].shape();
  std::size_t channels = 0;
  for (const auto& p : parts) {
    detail::expect_axis("concat_channels", "N", p.shape().n, first.n);
    detail::expect_axis("concat_channels", "H", p.shape().h, first.h);
    detail::expect_axis("concat_channels", "W", p.shape().w, first.w);
    channels += p.shape().c;
  }
  const std::size_t plane = first.plane();
  Tensor<T> out(Shape{first.n, channels, first.h, first.w});
  for (std::size_t n = 0; n < first.n; ++n) {
    std::size_t c0 = 0;
    for (const auto& p : parts) {
      const std::size_t len = p.shape().c * plane;
      std::copy_n(p.data().begin() + n * len, len, out.data().begin() + (n * channels + c0) * plane);
      c0 += p.shape().c;
    }
  }
  std::vector<Tensor<T>> inputs(parts.begin(), parts.end());
  return graph.record("concat_channels", inputs, out,
                      [inputs, channels, plane](std::span<const T> gy) mutable {
                        const std::size_t batch = inputs[0].shape().n;
                        std::size_t c0 = 0;
                        for (auto& p : inputs) {
                          const std::size_t len = p.shape().c * plane;
                          std::span<T> g = detail::grad_sink(p);
                          if (!g.empty()) {
                            for (std::size_t n = 0; n < batch; ++n) {
                              const T* src = gy.data() + (n * channels + c0) * plane;
                              for (std::size_t i = 0; i < len; ++i) g[n * len + i] += src[i];
                            }
                          }
                          c0 += p.shape().c;
                        }
                      });
}

template <typename T>
Tensor<T> leaky_relu(Graph<T>& graph, const Tensor<T>& a, T slope = T(0.1)) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > T(0) ? a[i] : slope * a[i];
  return graph.record("leaky_relu", {a}, out, [a, slope](std::span<const T> gy) mutable {
    std::span<T> ga = detail::grad_sink(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += (a[i] > T(0) ? T(1) : slope) * gy[i];
  });
}

// Pass-through node. Gives a distinct tensor whose gradient is exactly the
// gradient flowing into this use of `a`.
template <typename T>
Tensor<T> identity(Graph<T>& graph, const Tensor<T>& a) {
  Tensor<T> out = a.clone();
  return graph.record("identity", {a}, out, [a](std::span<const T> gy) mutable {
    std::span<T> ga = detail::grad_sink(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i];
  });
}

// Same values, cut from the graph.
template <typename T>
Tensor<T> detach(const Tensor<T>& a) {
  return a.clone();
}

}  // namespace asff
