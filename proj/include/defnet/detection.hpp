#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "defnet/errors.hpp"

namespace defnet {

// Pixel-aligned box covering [x, x+w) x [y, y+h).
struct BoundingBox {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;

  bool operator==(const BoundingBox&) const = default;
};

inline double iou(const BoundingBox& a, const BoundingBox& b) {
  const int x0 = std::max(a.x, b.x), y0 = std::max(a.y, b.y);
  const int x1 = std::min(a.x + a.w, b.x + b.w), y1 = std::min(a.y + a.h, b.y + b.h);
  const int iw = x1 - x0, ih = y1 - y0;
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = static_cast<double>(iw) * ih;
  const double uni = static_cast<double>(a.w) * a.h + static_cast<double>(b.w) * b.h - inter;
  return inter / uni;
}

struct GtObject {
  int class_id = 0;
  BoundingBox box;
};

// One scored candidate region. refined holds the context-adjusted scores and
// stays empty until that stage runs.
struct Detection {
  int scene = 0;
  BoundingBox box;
  std::vector<double> scores;
  std::vector<double> refined;

  const std::vector<double>& final_scores() const { return refined.empty() ? scores : refined; }
};

struct FinalDetection {
  int scene = 0;
  BoundingBox box;
  int class_id = 0;
  double score = 0.0;
};

// Per-class, per-scene greedy non-maximum suppression followed by flattening
// into single-class detections. Ordering is deterministic under any strictly
// monotonic rescoring: ties fall back to scene and box coordinates.
inline std::vector<FinalDetection> finalize_detections(const std::vector<Detection>& dets,
                                                       std::size_t classes,
                                                       double nms_iou = 0.3) {
  std::vector<FinalDetection> out;
  std::vector<std::size_t> order(dets.size());
  for (std::size_t k = 0; k < classes; ++k) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const double sa = dets[a].final_scores()[k], sb = dets[b].final_scores()[k];
      if (sa != sb) return sa > sb;
      if (dets[a].scene != dets[b].scene) return dets[a].scene < dets[b].scene;
      return a < b;
    });
    std::vector<std::size_t> kept;
    for (std::size_t idx : order) {
      bool suppressed = false;
      for (std::size_t j : kept) {
        if (dets[j].scene == dets[idx].scene && iou(dets[j].box, dets[idx].box) > nms_iou) {
          suppressed = true;
          break;
        }
      }
      if (!suppressed) {
        kept.push_back(idx);
        out.push_back({dets[idx].scene, dets[idx].box, static_cast<int>(k),
                       dets[idx].final_scores()[k]});
      }
    }
  }
  return out;
}

struct EvalResult {
  std::vector<double> per_class_ap;     // indexed by class; 0 for skipped classes
  std::vector<bool> class_has_gt;       // false -> class skipped from the mean
  double map = 0.0;
  std::vector<int> skipped_classes;
};

// PASCAL-style evaluation: detections sorted by score, greedy one-to-one
// matching against ground truth at the IoU threshold, average precision by
// all-points interpolation, and the unweighted class mean.
inline EvalResult evaluate_map(const std::vector<FinalDetection>& dets,
                               const std::vector<std::vector<GtObject>>& gt_per_scene,
                               std::size_t classes, double iou_thresh = 0.5) {
  EvalResult res;
  res.per_class_ap.assign(classes, 0.0);
  res.class_has_gt.assign(classes, false);

  double ap_sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t k = 0; k < classes; ++k) {
    std::size_t gt_count = 0;
    for (const auto& scene_gt : gt_per_scene) {
      for (const GtObject& g : scene_gt) {
        if (g.class_id == static_cast<int>(k)) ++gt_count;
      }
    }
    if (gt_count == 0) {
      res.skipped_classes.push_back(static_cast<int>(k));
      continue;
    }
    res.class_has_gt[k] = true;

    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < dets.size(); ++i) {
      if (dets[i].class_id == static_cast<int>(k)) order.push_back(i);
    }
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
      if (dets[a].scene != dets[b].scene) return dets[a].scene < dets[b].scene;
      return a < b;
    });

    std::vector<std::vector<bool>> matched(gt_per_scene.size());
    for (std::size_t s = 0; s < gt_per_scene.size(); ++s) {
      matched[s].assign(gt_per_scene[s].size(), false);
    }

    std::vector<bool> is_tp(order.size(), false);
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
      const FinalDetection& d = dets[order[rank]];
      if (d.scene < 0 || d.scene >= static_cast<int>(gt_per_scene.size())) continue;
      const auto& scene_gt = gt_per_scene[d.scene];
      double best = 0.0;
      int best_idx = -1;
      for (std::size_t g = 0; g < scene_gt.size(); ++g) {
        if (scene_gt[g].class_id != static_cast<int>(k)) continue;
        const double v = iou(d.box, scene_gt[g].box);
        if (v > best) {
          best = v;
          best_idx = static_cast<int>(g);
        }
      }
      if (best >= iou_thresh && best_idx >= 0 && !matched[d.scene][best_idx]) {
        matched[d.scene][best_idx] = true;
        is_tp[rank] = true;
      }
    }

    // precision at every rank, then the all-points interpolated area
    std::vector<double> precision(order.size()), recall(order.size());
    std::size_t tp = 0;
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
      if (is_tp[rank]) ++tp;
      precision[rank] = static_cast<double>(tp) / static_cast<double>(rank + 1);
      recall[rank] = static_cast<double>(tp) / static_cast<double>(gt_count);
    }
    for (std::size_t i = precision.size(); i-- > 1;) {
      precision[i - 1] = std::max(precision[i - 1], precision[i]);
    }
    double ap = 0.0;
    double prev_recall = 0.0;
    for (std::size_t i = 0; i < order.size(); ++i) {
      if (recall[i] > prev_recall) {
        ap += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
      }
    }
    res.per_class_ap[k] = ap;
    ap_sum += ap;
    ++counted;
  }
  res.map = counted > 0 ? ap_sum / static_cast<double>(counted) : 0.0;
  return res;
}

}  // namespace defnet
