#pragma once

// Detection head objective and decoding.
//
// Head output per level is (N, 5, H, W): objectness logit, then box offsets
// (tx, ty, tw, th). A cell (row i, col j) at stride s predicts
//   cx = (j + 0.5 + tx) s,  cy = (i + 0.5 + ty) s,  w = s e^tw,  h = s e^th.
//
// loss = (1/N) sum_levels [ sum_cells weight * BCE(objectness)
//                           + box_weight * sum_positives (1 - IoU(pred, gt)) ]

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "asff/box.hpp"
#include "asff/errors.hpp"
#include "asff/graph.hpp"
#include "asff/targets.hpp"
#include "asff/tensor.hpp"

namespace asff {

inline constexpr std::size_t kHeadChannels = 5;
inline constexpr double kLogitClamp = 15.0;
inline constexpr double kLogSizeClamp = 4.0;
// Per-cell BCE at a saturated, correct logit (|logit| = 15) is ~3.1e-7; this
// is the documented upper bound used for the optimum check.
inline constexpr double kSaturatedBceFloor = 1e-4;

struct LossConfig {
  double box_weight = 2.0;
};

// Binary cross-entropy on a logit clamped to +-15. Returns value and
// d/dlogit (zero outside the clamp).
inline std::array<double, 2> bce_with_logit(double logit, double target) {
  const bool clamped = logit > kLogitClamp || logit < -kLogitClamp;
  const double x = std::clamp(logit, -kLogitClamp, kLogitClamp);
  const double value = std::max(x, 0.0) - x * target + std::log1p(std::exp(-std::abs(x)));
  const double sig = 1.0 / (1.0 + std::exp(-x));
  return {value, clamped ? 0.0 : sig - target};
}

inline Box decode_box(double tx, double ty, double tw, double th, std::size_t row, std::size_t col,
                      std::size_t stride) {
  const double s = static_cast<double>(stride);
  const double cx = (static_cast<double>(col) + 0.5 + tx) * s;
  const double cy = (static_cast<double>(row) + 0.5 + ty) * s;
  const double w = s * std::exp(std::clamp(tw, -kLogSizeClamp, kLogSizeClamp));
  const double h = s * std::exp(std::clamp(th, -kLogSizeClamp, kLogSizeClamp));
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

// IoU of the decoded prediction against `gt` and its gradient with respect
// to (tx, ty, tw, th). Disjoint boxes give IoU 0 and a zero gradient.
struct IouGrad {
  double iou = 0;
  std::array<double, 4> d{};
};

inline IouGrad iou_and_grad(double tx, double ty, double tw, double th, std::size_t row, std::size_t col,
                            std::size_t stride, const Box& gt) {
  const double s = static_cast<double>(stride);
  const Box p = decode_box(tx, ty, tw, th, row, col, stride);
  IouGrad out;
  const double iw = std::min(p.x2, gt.x2) - std::max(p.x1, gt.x1);
  const double ih = std::min(p.y2, gt.y2) - std::max(p.y1, gt.y1);
  if (iw <= 0 || ih <= 0 || gt.area() <= 0) return out;
  const double pw = p.width();
  const double ph = p.height();
  const double inter = iw * ih;
  const double uni = pw * ph + gt.area() - inter;
  out.iou = inter / uni;

  // d(iw)/d(cx) and d(iw)/d(w) from whichever edges are binding.
  const double diw_dc = (p.x2 < gt.x2 ? 1.0 : 0.0) - (p.x1 > gt.x1 ? 1.0 : 0.0);
  const double diw_dw = 0.5 * ((p.x2 < gt.x2 ? 1.0 : 0.0) + (p.x1 > gt.x1 ? 1.0 : 0.0));
  const double dih_dc = (p.y2 < gt.y2 ? 1.0 : 0.0) - (p.y1 > gt.y1 ? 1.0 : 0.0);
  const double dih_dh = 0.5 * ((p.y2 < gt.y2 ? 1.0 : 0.0) + (p.y1 > gt.y1 ? 1.0 : 0.0));

  const double d_inter = (uni + inter) / (uni * uni);  // dIoU/dI at fixed areas
  const double d_area = -inter / (uni * uni);           // dIoU/d(pred area)
  const double dcx = d_inter * ih * diw_dc;
  const double dcy = d_inter * iw * dih_dc;
  const double dw = d_inter * ih * diw_dw + d_area * ph;
  const double dh = d_inter * iw * dih_dh + d_area * pw;
  const bool w_free = std::abs(tw) < kLogSizeClamp;
  const bool h_free = std::abs(th) < kLogSizeClamp;
  out.d = {dcx * s, dcy * s, w_free ? dw * pw : 0.0, h_free ? dh * ph : 0.0};
  return out;
}

// Scalar detection loss over the three levels' head outputs.
template <typename T>
Tensor<T> detection_loss(Graph<T>& graph, const std::array<Tensor<T>, kLevels>& preds,
                         const TargetMaps<T>& targets, const LossConfig& cfg = {}) {
  const std::size_t batch = preds[0].shape().n;
  for (std::size_t l = 0; l < kLevels; ++l) {
    const Shape& ps = preds[l].shape();
    const Shape& ts = targets.objectness[l].shape();
    detail::expect_axis("detection_loss", "N", ps.n, ts.n);
    detail::expect_axis("detection_loss", "C", ps.c, kHeadChannels);
    detail::expect_axis("detection_loss", "H", ps.h, ts.h);
    detail::expect_axis("detection_loss", "W", ps.w, ts.w);
    for (std::size_t i = 0; i < preds[l].size(); ++i) {
      if (!std::isfinite(preds[l][i])) {
        const std::size_t plane = ps.plane();
        const std::size_t cell = i % plane;
        throw NumericError("detection_loss: non-finite prediction at level " + std::to_string(l + 1) +
                           ", batch " + std::to_string(i / (ps.c * plane)) + ", channel " +
                           std::to_string((i / plane) % ps.c) + ", position (" + std::to_string(cell / ps.w) +
                           "," + std::to_string(cell % ps.w) + ")");
      }
    }
  }

  const double inv_n = 1.0 / static_cast<double>(batch);
  double total = 0;
  std::array<std::vector<double>, kLevels> grads;
  for (std::size_t l = 0; l < kLevels; ++l) {
    const Tensor<T>& p = preds[l];
    const Shape& ps = p.shape();
    const std::size_t plane = ps.plane();
    grads[l].assign(p.size(), 0.0);
    for (std::size_t n = 0; n < ps.n; ++n) {
      for (std::size_t i = 0; i < plane; ++i) {
        const double wgt = static_cast<double>(targets.weight[l][n * plane + i]);
        if (wgt == 0.0) continue;
        const std::size_t k = n * kHeadChannels * plane + i;
        const auto [v, d] = bce_with_logit(static_cast<double>(p[k]), static_cast<double>(targets.objectness[l][n * plane + i]));
        total += wgt * v;
        grads[l][k] += wgt * d;
      }
    }
    for (const Positive& pos : targets.positives[l]) {
      const std::size_t cell = pos.cell.row * ps.w + pos.cell.col;
      const double wgt = static_cast<double>(targets.weight[l][pos.batch * plane + cell]);
      if (wgt == 0.0) continue;
      const auto ch = [&](std::size_t c) { return (pos.batch * kHeadChannels + c) * plane + cell; };
      const auto gtv = [&](std::size_t c) {
        return static_cast<double>(targets.box[l][(pos.batch * 4 + c) * plane + cell]);
      };
      const Box gt{gtv(0), gtv(1), gtv(2), gtv(3)};
      const IouGrad ig = iou_and_grad(p[ch(1)], p[ch(2)], p[ch(3)], p[ch(4)], pos.cell.row, pos.cell.col,
                                      targets.strides[l], gt);
      total += cfg.box_weight * wgt * (1.0 - ig.iou);
      for (std::size_t c = 0; c < 4; ++c) grads[l][ch(c + 1)] -= cfg.box_weight * wgt * ig.d[c];
    }
  }

  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total * inv_n));
  std::vector<Tensor<T>> inputs(preds.begin(), preds.end());
  return graph.record("detection_loss", inputs, out,
                      [inputs, grads = std::move(grads), inv_n](std::span<const T> gy) mutable {
                        const double scale = static_cast<double>(gy[0]) * inv_n;
                        for (std::size_t l = 0; l < kLevels; ++l) {
                          std::span<T> g = detail::grad_sink(inputs[l]);
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += static_cast<T>(scale * grads[l][i]);
                        }
                      });
}

struct DecodeConfig {
  double score_threshold = 0.05;
  std::size_t max_detections = 100;
  double nms_threshold = 0.6;
};

// Per-image detections from all levels, thresholded, capped, then NMS.
template <typename T>
std::vector<std::vector<Detection>> decode_detections(const std::array<Tensor<T>, kLevels>& preds,
                                                      const LevelStrides& strides, const DecodeConfig& cfg = {}) {
  const std::size_t batch = preds[0].shape().n;
  std::vector<std::vector<Detection>> out(batch);
  for (std::size_t n = 0; n < batch; ++n) {
    std::vector<Detection> cands;
    for (std::size_t l = 0; l < kLevels; ++l) {
      const Tensor<T>& p = preds[l];
      const Shape& ps = p.shape();
      const std::size_t plane = ps.plane();
      for (std::size_t r = 0; r < ps.h; ++r) {
        for (std::size_t c = 0; c < ps.w; ++c) {
          const auto ch = [&](std::size_t k) { return static_cast<double>(p[(n * kHeadChannels + k) * plane + r * ps.w + c]); };
          const double score = 1.0 / (1.0 + std::exp(-std::clamp(ch(0), -kLogitClamp, kLogitClamp)));
          if (score < cfg.score_threshold) continue;
          cands.push_back({decode_box(ch(1), ch(2), ch(3), ch(4), r, c, strides[l]), score, 0});
        }
      }
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    if (cands.size() > cfg.max_detections) cands.resize(cfg.max_detections);
    out[n] = nms(cands, cfg.nms_threshold);
  }
  return out;
}

}  // namespace asff
