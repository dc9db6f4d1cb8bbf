#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

namespace asff {

// Axis-aligned box in pixel coordinates, x2 > x1 and y2 > y1 when valid.
struct Box {
  double x1 = 0;
  double y1 = 0;
  double x2 = 0;
  double y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }

  friend bool operator==(const Box&, const Box&) = default;
};

struct Detection {
  Box box;
  double score = 0;  // in [0, 1]
  int class_id = 0;

  friend bool operator==(const Detection&, const Detection&) = default;
};

// Intersection over union; 0 for disjoint or zero-area boxes.
inline double iou(const Box& a, const Box& b) {
  if (a.area() <= 0.0 || b.area() <= 0.0) return 0.0;
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

// Greedy per-class NMS. Candidates are visited by descending score, equal
// scores in input order; a candidate is dropped when its IoU with an already
// kept box of the same class exceeds `threshold`. Output is in visit order.
inline std::vector<Detection> nms(std::span<const Detection> dets, double threshold = 0.6) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<Detection> kept;
  for (std::size_t idx : order) {
    const Detection& cand = dets[idx];
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (k.class_id == cand.class_id && iou(k.box, cand.box) > threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(cand);
  }
  return kept;
}

// AP at one IoU threshold (AP50-style with the default), single class,
// pooled over images. Detections are matched by descending score to the
// best-overlapping still-unmatched ground truth of the same image; precision
// is made monotone and integrated over every recall step (all-point).
// Returns nullopt when there is no ground truth at all.
inline std::optional<double> evaluate_ap(std::span<const std::vector<Detection>> detections,
                                         std::span<const std::vector<Box>> ground_truth,
                                         double iou_threshold = 0.5) {
  std::size_t total_gt = 0;
  for (const auto& g : ground_truth) total_gt += g.size();
  if (total_gt == 0) return std::nullopt;

  struct Ref {
    std::size_t image;
    std::size_t index;
    double score;
  };
  std::vector<Ref> refs;
  for (std::size_t img = 0; img < detections.size(); ++img) {
    for (std::size_t i = 0; i < detections[img].size(); ++i) {
      refs.push_back({img, i, detections[img][i].score});
    }
  }
  std::stable_sort(refs.begin(), refs.end(), [](const Ref& a, const Ref& b) { return a.score > b.score; });

  std::vector<std::vector<bool>> matched(ground_truth.size());
  for (std::size_t img = 0; img < ground_truth.size(); ++img) matched[img].assign(ground_truth[img].size(), false);

  std::vector<double> precision;
  std::vector<double> recall;
  std::size_t tp = 0;
  std::size_t seen = 0;
  for (const Ref& r : refs) {
    ++seen;
    if (r.image < ground_truth.size()) {
      const Box& box = detections[r.image][r.index].box;
      double best = iou_threshold;
      std::optional<std::size_t> hit;
      for (std::size_t g = 0; g < ground_truth[r.image].size(); ++g) {
        if (matched[r.image][g]) continue;
        const double o = iou(box, ground_truth[r.image][g]);
        if (o >= best) {
          best = o;
          hit = g;
        }
      }
      if (hit) {
        matched[r.image][*hit] = true;
        ++tp;
      }
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(seen));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
  }

  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

}  // namespace asff
