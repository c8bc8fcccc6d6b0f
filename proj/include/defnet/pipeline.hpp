#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "defnet/dataset.hpp"
#include "defnet/detection.hpp"
#include "defnet/errors.hpp"
#include "defnet/net.hpp"
#include "defnet/rng.hpp"
#include "defnet/svm.hpp"
#include "defnet/tensor.hpp"

namespace defnet {

// --- proposals -----------------------------------------------------------------

struct ProposalSpec {
  std::vector<int> scales{8, 12, 16};
  int stride = 3;
};

namespace detail {

// stride grid plus a final start flush with the far edge, so every object
// position can be covered regardless of divisibility
inline std::vector<int> grid_starts(int extent, int size, int stride) {
  std::vector<int> xs;
  for (int x = 0; x + size <= extent; x += stride) xs.push_back(x);
  if (!xs.empty() && xs.back() != extent - size) xs.push_back(extent - size);
  return xs;
}

}  // namespace detail

inline std::vector<BoundingBox> propose_boxes(int image_h, int image_w,
                                              const ProposalSpec& spec = {}) {
  if (image_h < 1 || image_w < 1) throw ParameterError("empty image");
  if (spec.stride < 1) throw ParameterError("proposal stride must be >= 1");
  std::vector<BoundingBox> out;
  for (int s : spec.scales) {
    if (s > image_h || s > image_w) continue;
    for (int y : detail::grid_starts(image_h, s, spec.stride)) {
      for (int x : detail::grid_starts(image_w, s, spec.stride)) {
        out.push_back({x, y, s, s});
      }
    }
  }
  return out;
}

// --- crop and warp ----------------------------------------------------------------

// Bilinear resample of a box region to a square patch.
inline Tensor crop_warp(const Tensor& image, const BoundingBox& box, std::size_t out_size) {
  if (image.rank() != 3) throw DimensionError("crop_warp expects [C,H,W]");
  if (box.w < 1 || box.h < 1) throw ParameterError("degenerate box");
  const std::size_t channels = image.dim(0);
  const int h = static_cast<int>(image.dim(1)), w = static_cast<int>(image.dim(2));
  Tensor out({channels, out_size, out_size});
  for (std::size_t oy = 0; oy < out_size; ++oy) {
    const double fy = box.y + (oy + 0.5) * box.h / static_cast<double>(out_size) - 0.5;
    const double cy = std::clamp(fy, 0.0, static_cast<double>(h - 1));
    const int y0 = static_cast<int>(cy);
    const int y1 = std::min(y0 + 1, h - 1);
    const double wy = cy - y0;
    for (std::size_t ox = 0; ox < out_size; ++ox) {
      const double fx = box.x + (ox + 0.5) * box.w / static_cast<double>(out_size) - 0.5;
      const double cx = std::clamp(fx, 0.0, static_cast<double>(w - 1));
      const int x0 = static_cast<int>(cx);
      const int x1 = std::min(x0 + 1, w - 1);
      const double wx = cx - x0;
      for (std::size_t c = 0; c < channels; ++c) {
        const double top = (1.0 - wx) * image.at(c, y0, x0) + wx * image.at(c, y0, x1);
        const double bot = (1.0 - wx) * image.at(c, y1, x0) + wx * image.at(c, y1, x1);
        out.at(c, oy, ox) = (1.0 - wy) * top + wy * bot;
      }
    }
  }
  return out;
}

// --- parallel scene loop ------------------------------------------------------------

// Runs fn(scene_index, worker_index) once per scene. Work distribution is
// dynamic but every result lands in its own slot, so the aggregate is
// independent of thread scheduling.
template <typename Fn>
inline void parallel_scenes(std::size_t count, unsigned threads, Fn&& fn) {
  if (threads == 0) threads = std::thread::hardware_concurrency();
  if (threads <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i, 0u);
    return;
  }
  threads = std::min<unsigned>(threads, static_cast<unsigned>(count));
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&, t]() {
      for (std::size_t i = next.fetch_add(1); i < count; i = next.fetch_add(1)) fn(i, t);
    });
  }
  for (std::thread& th : pool) th.join();
}

// --- bounding box rejection -----------------------------------------------------------

// 8x8 intensity thumbnail of the box region; the cheap feature the rejector
// and the theme scorer share.
inline std::vector<double> thumbnail_features(const Tensor& image, const BoundingBox& box) {
  const Tensor warped = crop_warp(image, box, 8);
  return warped.data();
}

// Linear background-vs-object scorer over proposal thumbnails.
class Rejector {
 public:
  void fit(const std::vector<SyntheticScene>& scenes, const ProposalSpec& prop = {},
           SvmConfig cfg = {}) {
    std::vector<std::vector<double>> xs;
    std::vector<int> ys;
    std::vector<std::vector<double>> neg_pool;
    for (const SyntheticScene& scene : scenes) {
      const int h = static_cast<int>(scene.image.dim(1));
      const int w = static_cast<int>(scene.image.dim(2));
      for (const BoundingBox& box : propose_boxes(h, w, prop)) {
        double best = 0.0;
        for (const GtObject& g : scene.objects) best = std::max(best, iou(box, g.box));
        if (best >= 0.5) {
          xs.push_back(thumbnail_features(scene.image, box));
          ys.push_back(1);
        } else if (best < 0.3) {
          neg_pool.push_back(thumbnail_features(scene.image, box));
        }
      }
    }
    if (xs.empty()) throw ParameterError("rejector: no positive proposals in the training split");
    // subsample background to 3x the positives, deterministically
    Rng rng(cfg.seed);
    const std::size_t want = std::min(neg_pool.size(), xs.size() * 3);
    std::vector<std::size_t> order(neg_pool.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    for (std::size_t i = 0; i < want; ++i) {
      xs.push_back(std::move(neg_pool[order[i]]));
      ys.push_back(-1);
    }
    svm_.fit(xs, ys, cfg);
  }

  double score(const Tensor& image, const BoundingBox& box) const {
    return svm_.score(thumbnail_features(image, box));
  }

  std::vector<double> objectness(const Tensor& image, const std::vector<BoundingBox>& boxes) const {
    std::vector<double> s;
    s.reserve(boxes.size());
    for (const BoundingBox& b : boxes) s.push_back(score(image, b));
    return s;
  }

 private:
  LinearSvm svm_;
};

// Keep the top fraction by objectness; the survivors come back in their
// original order and equal scores break toward earlier boxes.
inline std::vector<BoundingBox> reject_boxes(const std::vector<BoundingBox>& boxes,
                                             const std::vector<double>& objectness,
                                             double keep_fraction) {
  if (!(keep_fraction > 0.0) || keep_fraction > 1.0) {
    throw ParameterError("keep_fraction must be in (0, 1]");
  }
  if (boxes.size() != objectness.size()) throw DimensionError("objectness length mismatch");
  if (boxes.empty()) return {};
  std::size_t keep = static_cast<std::size_t>(
      std::llround(keep_fraction * static_cast<double>(boxes.size())));
  keep = std::clamp<std::size_t>(keep, 1, boxes.size());

  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (objectness[a] != objectness[b]) return objectness[a] > objectness[b];
    return a < b;
  });
  order.resize(keep);
  std::sort(order.begin(), order.end());
  std::vector<BoundingBox> out;
  out.reserve(keep);
  for (std::size_t i : order) out.push_back(boxes[i]);
  return out;
}

// --- detection --------------------------------------------------------------------------

// Propose, optionally reject, crop-warp and score every box of every scene.
inline std::vector<Detection> detect_scenes(Network& net, const std::vector<SyntheticScene>& scenes,
                                            const ProposalSpec& prop, const Rejector* rejector,
                                            double keep_fraction, std::size_t warp_size,
                                            unsigned threads = 0) {
  std::vector<std::vector<Detection>> per_scene(scenes.size());

  if (threads == 0) threads = std::thread::hardware_concurrency();
  threads = std::max(1u, std::min<unsigned>(threads, 8));
  std::vector<Network> workers;
  workers.reserve(threads);
  for (unsigned t = 0; t < threads; ++t) workers.push_back(net.clone());

  parallel_scenes(scenes.size(), threads, [&](std::size_t i, unsigned worker) {
    const SyntheticScene& scene = scenes[i];
    const int h = static_cast<int>(scene.image.dim(1));
    const int w = static_cast<int>(scene.image.dim(2));
    std::vector<BoundingBox> boxes = propose_boxes(h, w, prop);
    if (rejector != nullptr && keep_fraction < 1.0) {
      boxes = reject_boxes(boxes, rejector->objectness(scene.image, boxes), keep_fraction);
    }
    Network& model = workers[worker];
    for (const BoundingBox& box : boxes) {
      Detection d;
      d.scene = static_cast<int>(i);
      d.box = box;
      d.scores = model.forward(crop_warp(scene.image, box, warp_size));
      per_scene[i].push_back(std::move(d));
    }
  });

  std::vector<Detection> out;
  for (auto& v : per_scene) {
    for (Detection& d : v) out.push_back(std::move(d));
  }
  return out;
}

// --- context ---------------------------------------------------------------------------

// Whole-image theme scores from one-vs-rest linear classifiers over scene
// thumbnails; the stand-in for an image classification network.
class ThemeScorer {
 public:
  void fit(const std::vector<SyntheticScene>& scenes, int themes, SvmConfig cfg = {}) {
    if (scenes.empty() || themes < 1) throw ParameterError("theme scorer needs scenes and themes");
    svms_.assign(themes, LinearSvm{});
    std::vector<std::vector<double>> xs;
    xs.reserve(scenes.size());
    for (const SyntheticScene& s : scenes) xs.push_back(whole_image_features(s.image));
    for (int m = 0; m < themes; ++m) {
      std::vector<int> ys;
      ys.reserve(scenes.size());
      for (const SyntheticScene& s : scenes) ys.push_back(s.theme == m ? 1 : -1);
      SvmConfig c = cfg;
      c.seed = cfg.seed + static_cast<std::uint64_t>(m);
      svms_[m].fit(xs, ys, c);
    }
  }

  std::vector<double> scores(const Tensor& image) const {
    const std::vector<double> x = whole_image_features(image);
    std::vector<double> out;
    out.reserve(svms_.size());
    for (const LinearSvm& svm : svms_) out.push_back(svm.score(x));
    return out;
  }

  std::size_t themes() const { return svms_.size(); }

  static std::vector<double> whole_image_features(const Tensor& image) {
    const BoundingBox whole{0, 0, static_cast<int>(image.dim(2)), static_cast<int>(image.dim(1))};
    return thumbnail_features(image, whole);
  }

 private:
  std::vector<LinearSvm> svms_;
};

// Per-class linear refinement over the concatenation of (context, detection)
// scores, in that order.
struct ContextWeights {
  std::vector<std::vector<double>> w;  // one row per class, length M + K
  std::vector<double> b;               // one bias per class
};

inline std::vector<double> context_refine(const std::vector<double>& det_scores,
                                          const std::vector<double>& scene_scores,
                                          const ContextWeights& cw) {
  const std::size_t k_count = cw.w.size();
  if (cw.b.size() != k_count) throw DimensionError("context weights/bias mismatch");
  if (k_count != det_scores.size()) throw DimensionError("context classes mismatch");
  std::vector<double> refined(k_count, 0.0);
  for (std::size_t k = 0; k < k_count; ++k) {
    if (cw.w[k].size() != scene_scores.size() + det_scores.size()) {
      throw DimensionError("context weight row length mismatch");
    }
    double s = cw.b[k];
    std::size_t i = 0;
    for (double v : scene_scores) s += cw.w[k][i++] * v;
    for (double v : det_scores) s += cw.w[k][i++] * v;
    refined[k] = s;
  }
  return refined;
}

class ContextRefiner {
 public:
  // theme scorer is trained on the train split; the per-class refinement is
  // learned from detections on held-out scenes (the val1 analog)
  void fit(const std::vector<SyntheticScene>& theme_scenes, int themes,
           const std::vector<SyntheticScene>& svm_scenes, const std::vector<Detection>& dets,
           std::size_t classes, SvmConfig theme_cfg = {}, SvmConfig refine_cfg = {}) {
    themes_.fit(theme_scenes, themes, theme_cfg);
    const std::size_t m_count = themes_.themes();

    std::vector<std::vector<double>> scene_scores(svm_scenes.size());
    for (std::size_t s = 0; s < svm_scenes.size(); ++s) {
      scene_scores[s] = themes_.scores(svm_scenes[s].image);
    }

    std::vector<std::vector<double>> xs;
    xs.reserve(dets.size());
    for (const Detection& d : dets) {
      std::vector<double> x = scene_scores[d.scene];
      x.insert(x.end(), d.scores.begin(), d.scores.end());
      xs.push_back(std::move(x));
    }

    cw_.w.assign(classes, std::vector<double>(m_count + classes, 0.0));
    cw_.b.assign(classes, 0.0);
    for (std::size_t k = 0; k < classes; ++k) {
      std::vector<std::size_t> pos, neg;
      for (std::size_t i = 0; i < dets.size(); ++i) {
        double best = 0.0;
        for (const GtObject& g : svm_scenes[dets[i].scene].objects) {
          if (g.class_id == static_cast<int>(k)) best = std::max(best, iou(dets[i].box, g.box));
        }
        (best >= 0.5 ? pos : neg).push_back(i);
      }
      SvmConfig c = refine_cfg;
      c.seed = refine_cfg.seed + 1000 + static_cast<std::uint64_t>(k);
      Rng rng(c.seed);
      rng.shuffle(neg);
      neg.resize(std::min(neg.size(), std::max<std::size_t>(pos.size() * 3, 32)));

      std::vector<std::vector<double>> sub_x;
      std::vector<int> sub_y;
      for (std::size_t i : pos) {
        sub_x.push_back(xs[i]);
        sub_y.push_back(1);
      }
      for (std::size_t i : neg) {
        sub_x.push_back(xs[i]);
        sub_y.push_back(-1);
      }

      LinearSvm svm;
      // identity on the detection block: training starts from a no-op
      svm.weights().assign(m_count + classes, 0.0);
      svm.weights()[m_count + k] = 1.0;
      svm.bias() = 0.0;
      if (!sub_x.empty()) svm.fit(sub_x, sub_y, c);
      cw_.w[k] = svm.weights();
      cw_.b[k] = svm.bias();
    }
  }

  // fill Detection::refined on every detection
  void apply(std::vector<Detection>& dets, const std::vector<SyntheticScene>& scenes) const {
    std::vector<std::vector<double>> cache(scenes.size());
    for (Detection& d : dets) {
      auto& sc = cache[d.scene];
      if (sc.empty()) sc = themes_.scores(scenes[d.scene].image);
      d.refined = context_refine(d.scores, sc, cw_);
    }
  }

  const ContextWeights& weights() const { return cw_; }
  const ThemeScorer& theme_scorer() const { return themes_; }

 private:
  ThemeScorer themes_;
  ContextWeights cw_;
};

// --- bounding box regression ----------------------------------------------------------------

namespace detail {

// Solve (A + lambda I) x = b by Cholesky; lambda escalates until the
// factorization succeeds, so the solve cannot fail.
inline std::vector<double> ridge_solve(std::vector<std::vector<double>> a,
                                       const std::vector<double>& b, double lambda) {
  const std::size_t n = a.size();
  for (int attempt = 0; attempt < 40; ++attempt) {
    std::vector<std::vector<double>> l(n, std::vector<double>(n, 0.0));
    bool ok = true;
    for (std::size_t i = 0; i < n && ok; ++i) {
      for (std::size_t j = 0; j <= i && ok; ++j) {
        double s = a[i][j] + (i == j ? lambda : 0.0);
        for (std::size_t p = 0; p < j; ++p) s -= l[i][p] * l[j][p];
        if (i == j) {
          if (s <= 1e-12) {
            ok = false;
          } else {
            l[i][i] = std::sqrt(s);
          }
        } else {
          l[i][j] = s / l[j][j];
        }
      }
    }
    if (!ok) {
      lambda = lambda <= 0.0 ? 1e-6 : lambda * 10.0;
      continue;
    }
    std::vector<double> y(n, 0.0), x(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double s = b[i];
      for (std::size_t p = 0; p < i; ++p) s -= l[i][p] * y[p];
      y[i] = s / l[i][i];
    }
    for (std::size_t i = n; i-- > 0;) {
      double s = y[i];
      for (std::size_t p = i + 1; p < n; ++p) s -= l[p][i] * x[p];
      x[i] = s / l[i][i];
    }
    return x;
  }
  throw std::runtime_error("ridge solve failed to regularize");
}

}  // namespace detail

struct BoxTargets {
  double tx = 0.0, ty = 0.0, tw = 0.0, th = 0.0;
};

inline BoxTargets regression_targets(const BoundingBox& proposal, const BoundingBox& gt) {
  const double pw = proposal.w, ph = proposal.h;
  const double pcx = proposal.x + pw / 2.0, pcy = proposal.y + ph / 2.0;
  const double gcx = gt.x + gt.w / 2.0, gcy = gt.y + gt.h / 2.0;
  return {(gcx - pcx) / pw, (gcy - pcy) / ph, std::log(gt.w / pw), std::log(gt.h / ph)};
}

inline BoundingBox apply_targets(const BoundingBox& proposal, const BoxTargets& t, int image_h,
                                 int image_w) {
  const double pw = proposal.w, ph = proposal.h;
  const double cx = proposal.x + pw / 2.0 + t.tx * pw;
  const double cy = proposal.y + ph / 2.0 + t.ty * ph;
  const double nw = pw * std::exp(t.tw);
  const double nh = ph * std::exp(t.th);
  BoundingBox out;
  out.w = std::max(1, static_cast<int>(std::lround(nw)));
  out.h = std::max(1, static_cast<int>(std::lround(nh)));
  out.x = static_cast<int>(std::lround(cx - nw / 2.0));
  out.y = static_cast<int>(std::lround(cy - nh / 2.0));
  out.w = std::min(out.w, image_w);
  out.h = std::min(out.h, image_h);
  out.x = std::clamp(out.x, 0, image_w - out.w);
  out.y = std::clamp(out.y, 0, image_h - out.h);
  return out;
}

// Per-class ridge regression from flattened trunk features to box offsets.
class BboxRegressor {
 public:
  // proposals with IoU >= min_iou against a ground-truth box become training
  // pairs for that box's class
  void fit(Network& net, const std::vector<SyntheticScene>& scenes, std::size_t classes,
           const ProposalSpec& prop, std::size_t warp_size, double lambda = 1.0,
           double min_iou = 0.6) {
    warp_size_ = warp_size;
    const std::size_t dim = feature_dim(net);
    weights_.assign(classes, {});

    std::vector<std::vector<std::vector<double>>> xtx(
        classes, std::vector<std::vector<double>>(dim, std::vector<double>(dim, 0.0)));
    std::vector<std::vector<std::vector<double>>> xty(
        classes, std::vector<std::vector<double>>(4, std::vector<double>(dim, 0.0)));
    std::vector<std::size_t> count(classes, 0);

    for (const SyntheticScene& scene : scenes) {
      const int h = static_cast<int>(scene.image.dim(1));
      const int w = static_cast<int>(scene.image.dim(2));
      for (const BoundingBox& box : propose_boxes(h, w, prop)) {
        const GtObject* best_gt = nullptr;
        double best = min_iou;
        for (const GtObject& g : scene.objects) {
          const double v = iou(box, g.box);
          if (v >= best) {
            best = v;
            best_gt = &g;
          }
        }
        if (best_gt == nullptr) continue;
        const std::size_t k = static_cast<std::size_t>(best_gt->class_id);
        const std::vector<double> phi = features(net, scene.image, box);
        const BoxTargets t = regression_targets(box, best_gt->box);
        const double targets[4] = {t.tx, t.ty, t.tw, t.th};
        for (std::size_t i = 0; i < dim; ++i) {
          for (std::size_t j = 0; j <= i; ++j) xtx[k][i][j] += phi[i] * phi[j];
          for (int d = 0; d < 4; ++d) xty[k][d][i] += phi[i] * targets[d];
        }
        ++count[k];
      }
    }

    for (std::size_t k = 0; k < classes; ++k) {
      if (count[k] == 0) continue;  // class stays a no-op
      for (std::size_t i = 0; i < dim; ++i) {
        for (std::size_t j = i + 1; j < dim; ++j) xtx[k][i][j] = xtx[k][j][i];
      }
      weights_[k].resize(4);
      for (int d = 0; d < 4; ++d) {
        weights_[k][d] = detail::ridge_solve(xtx[k], xty[k][d], lambda);
      }
    }
  }

  bool trained_for(std::size_t class_id) const {
    return class_id < weights_.size() && !weights_[class_id].empty();
  }

  BoxTargets predict(Network& net, const Tensor& image, const BoundingBox& box,
                     std::size_t class_id) const {
    if (!trained_for(class_id)) return {};
    const std::vector<double> phi = features(net, image, box);
    BoxTargets t;
    double* out[4] = {&t.tx, &t.ty, &t.tw, &t.th};
    for (int d = 0; d < 4; ++d) {
      double s = 0.0;
      for (std::size_t i = 0; i < phi.size(); ++i) s += weights_[class_id][d][i] * phi[i];
      *out[d] = s;
    }
    return t;
  }

  BoundingBox apply(Network& net, const Tensor& image, const BoundingBox& box,
                    std::size_t class_id) const {
    const BoxTargets t = predict(net, image, box, class_id);
    return apply_targets(box, t, static_cast<int>(image.dim(1)), static_cast<int>(image.dim(2)));
  }

  std::vector<double> features(Network& net, const Tensor& image, const BoundingBox& box) const {
    const Tensor f = net.trunk_features(crop_warp(image, box, warp_size_));
    std::vector<double> phi = f.data();
    phi.push_back(1.0);
    return phi;
  }

 private:
  std::size_t feature_dim(Network& net) {
    const std::size_t s = net.config().input_size;
    Tensor probe({net.config().input_channels, s, s}, 0.0);
    return net.trunk_features(probe).size() + 1;
  }

  std::size_t warp_size_ = 20;
  // weights_[class][target][feature]; empty per class until fitted
  std::vector<std::vector<std::vector<double>>> weights_;
};

// --- two-stage training -----------------------------------------------------------------

enum class PretrainScheme { kNone, kImageLevel, kObjectLevel };

inline std::string scheme_name(PretrainScheme s) {
  switch (s) {
    case PretrainScheme::kNone: return "none";
    case PretrainScheme::kImageLevel: return "image";
    case PretrainScheme::kObjectLevel: return "object";
  }
  throw ParameterError("unknown scheme");
}

inline PretrainScheme scheme_from_name(const std::string& s) {
  if (s == "none") return PretrainScheme::kNone;
  if (s == "image") return PretrainScheme::kImageLevel;
  if (s == "object") return PretrainScheme::kObjectLevel;
  throw ParameterError("scheme must be image or object");
}

// Tight ground-truth crops labeled with their class.
inline std::vector<LabeledImage> object_level_samples(const std::vector<SyntheticScene>& scenes,
                                                      std::size_t classes, std::size_t warp_size) {
  std::vector<LabeledImage> out;
  for (const SyntheticScene& scene : scenes) {
    for (const GtObject& g : scene.objects) {
      std::vector<int> labels(classes, -1);
      labels[g.class_id] = 1;
      out.push_back({crop_warp(scene.image, g.box, warp_size), std::move(labels)});
    }
  }
  return out;
}

// Whole scenes warped down, labeled with every class present.
inline std::vector<LabeledImage> image_level_samples(const std::vector<SyntheticScene>& scenes,
                                                     std::size_t classes, std::size_t warp_size) {
  std::vector<LabeledImage> out;
  for (const SyntheticScene& scene : scenes) {
    const BoundingBox whole{0, 0, static_cast<int>(scene.image.dim(2)),
                            static_cast<int>(scene.image.dim(1))};
    std::vector<int> labels(classes, -1);
    for (const GtObject& g : scene.objects) labels[g.class_id] = 1;
    out.push_back({crop_warp(scene.image, whole, warp_size), std::move(labels)});
  }
  return out;
}

// Proposal crops for fine-tuning: IoU >= 0.5 against a ground truth is a
// positive for that class, below 0.3 it is background (all labels -1), and
// the ambiguous band in between is skipped. Background crops are subsampled.
inline std::vector<LabeledImage> detection_samples(const std::vector<SyntheticScene>& scenes,
                                                   std::size_t classes, std::size_t warp_size,
                                                   const ProposalSpec& prop,
                                                   const Rejector* rejector, double keep_fraction,
                                                   double neg_per_pos, std::uint64_t seed) {
  std::vector<LabeledImage> positives;
  std::vector<LabeledImage> negatives;
  for (const SyntheticScene& scene : scenes) {
    const int h = static_cast<int>(scene.image.dim(1));
    const int w = static_cast<int>(scene.image.dim(2));
    std::vector<BoundingBox> boxes = propose_boxes(h, w, prop);
    if (rejector != nullptr && keep_fraction < 1.0) {
      boxes = reject_boxes(boxes, rejector->objectness(scene.image, boxes), keep_fraction);
    }
    for (const BoundingBox& box : boxes) {
      std::vector<int> labels(classes, -1);
      double best = 0.0;
      for (const GtObject& g : scene.objects) {
        const double v = iou(box, g.box);
        best = std::max(best, v);
        if (v >= 0.5) labels[g.class_id] = 1;
      }
      if (best >= 0.5) {
        positives.push_back({crop_warp(scene.image, box, warp_size), std::move(labels)});
      } else if (best < 0.3) {
        negatives.push_back({crop_warp(scene.image, box, warp_size), std::move(labels)});
      }
    }
  }
  Rng rng(seed);
  std::vector<std::size_t> order(negatives.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  const std::size_t keep = std::min(
      negatives.size(),
      std::max<std::size_t>(32, static_cast<std::size_t>(positives.size() * neg_per_pos)));
  std::vector<LabeledImage> out = std::move(positives);
  for (std::size_t i = 0; i < keep; ++i) out.push_back(std::move(negatives[order[i]]));
  return out;
}

// Optional pretraining stage followed by fine-tuning. The head carries over
// with its pretrained weights when the class counts match and is freshly
// initialized otherwise.
inline void run_two_stage(Network& net, const std::vector<LabeledImage>& pretrain_set,
                          const std::vector<LabeledImage>& finetune_set,
                          const TrainConfig& pretrain_cfg, const TrainConfig& finetune_cfg,
                          std::size_t finetune_classes, std::uint64_t head_seed) {
  if (!pretrain_set.empty()) train(net, pretrain_set, pretrain_cfg);
  if (net.classes() != finetune_classes) net.reinit_head(finetune_classes, head_seed);
  if (finetune_set.empty()) throw ParameterError("fine-tuning set is empty");
  train(net, finetune_set, finetune_cfg);
}

inline Network pretrain_then_finetune(const Dataset& ds, PretrainScheme scheme,
                                      const NetConfig& ncfg, const TrainConfig& pretrain_cfg,
                                      const TrainConfig& finetune_cfg,
                                      const ProposalSpec& prop = {},
                                      const Rejector* rejector = nullptr,
                                      double keep_fraction = 1.0) {
  const std::size_t classes = static_cast<std::size_t>(ds.spec.classes);
  Network net(ncfg);
  std::vector<LabeledImage> pretrain_set;
  if (scheme == PretrainScheme::kObjectLevel) {
    pretrain_set = object_level_samples(ds.train, classes, ncfg.input_size);
  } else if (scheme == PretrainScheme::kImageLevel) {
    pretrain_set = image_level_samples(ds.train, classes, ncfg.input_size);
  }
  const std::vector<LabeledImage> finetune_set =
      detection_samples(ds.train, classes, ncfg.input_size, prop, rejector, keep_fraction,
                        /*neg_per_pos=*/2.0, finetune_cfg.seed + 17);
  run_two_stage(net, pretrain_set, finetune_set, pretrain_cfg, finetune_cfg, classes,
                ncfg.seed + 99);
  return net;
}

// --- end-to-end evaluation ---------------------------------------------------------------

struct PipelineOptions {
  const Rejector* rejector = nullptr;
  double keep_fraction = 1.0;
  const ContextRefiner* context = nullptr;
  const BboxRegressor* regressor = nullptr;
  double nms_iou = 0.3;
  unsigned threads = 0;
};

inline std::vector<FinalDetection> run_detection(Network& net,
                                                 const std::vector<SyntheticScene>& scenes,
                                                 std::size_t classes, const ProposalSpec& prop,
                                                 std::size_t warp_size,
                                                 const PipelineOptions& opt) {
  std::vector<Detection> dets = detect_scenes(net, scenes, prop, opt.rejector, opt.keep_fraction,
                                              warp_size, opt.threads);
  if (opt.context != nullptr) opt.context->apply(dets, scenes);
  std::vector<FinalDetection> finals = finalize_detections(dets, classes, opt.nms_iou);
  if (opt.regressor != nullptr) {
    for (FinalDetection& f : finals) {
      f.box = opt.regressor->apply(net, scenes[f.scene].image, f.box,
                                   static_cast<std::size_t>(f.class_id));
    }
  }
  return finals;
}

inline EvalResult evaluate_detector(Network& net, const std::vector<SyntheticScene>& scenes,
                                    std::size_t classes, const ProposalSpec& prop,
                                    std::size_t warp_size, const PipelineOptions& opt) {
  const std::vector<FinalDetection> finals =
      run_detection(net, scenes, classes, prop, warp_size, opt);
  return evaluate_map(finals, ground_truth_of(scenes), classes);
}

// --- greedy model averaging -----------------------------------------------------------------

struct EnsembleSelection {
  std::vector<int> selected;          // indices into the candidate list, in pick order
  std::vector<double> single_maps;    // val mAP of each candidate alone
  double ensemble_map = 0.0;          // val mAP of the averaged selection
};

// Greedy forward selection over candidate models. Every candidate must have
// scored the same (scene, box) list; the ensemble score of a box is the
// unweighted mean over selected models.
inline EnsembleSelection greedy_ensemble(const std::vector<std::vector<Detection>>& models,
                                         const std::vector<std::vector<GtObject>>& gt,
                                         std::size_t classes, double nms_iou = 0.3) {
  if (models.empty()) throw ParameterError("greedy_ensemble needs at least one model");
  const std::size_t n_dets = models[0].size();
  for (const auto& dets : models) {
    if (dets.size() != n_dets) throw DimensionError("candidate models scored different box lists");
    for (std::size_t i = 0; i < n_dets; ++i) {
      if (!(dets[i].box == models[0][i].box) || dets[i].scene != models[0][i].scene) {
        throw DimensionError("candidate models scored different box lists");
      }
    }
  }

  auto map_of = [&](const std::vector<int>& picks) {
    std::vector<Detection> avg = models[picks[0]];
    for (Detection& d : avg) {
      if (!d.refined.empty()) {
        d.scores = d.refined;
        d.refined.clear();
      }
    }
    for (std::size_t m = 1; m < picks.size(); ++m) {
      const auto& dets = models[picks[m]];
      for (std::size_t i = 0; i < n_dets; ++i) {
        const std::vector<double>& s = dets[i].final_scores();
        for (std::size_t k = 0; k < s.size(); ++k) avg[i].scores[k] += s[k];
      }
    }
    const double inv = 1.0 / static_cast<double>(picks.size());
    for (Detection& d : avg) {
      for (double& s : d.scores) s *= inv;
    }
    return evaluate_map(finalize_detections(avg, classes, nms_iou), gt, classes).map;
  };

  EnsembleSelection sel;
  for (std::size_t m = 0; m < models.size(); ++m) {
    sel.single_maps.push_back(map_of({static_cast<int>(m)}));
  }
  std::size_t best = 0;
  for (std::size_t m = 1; m < models.size(); ++m) {
    if (sel.single_maps[m] > sel.single_maps[best]) best = m;
  }
  sel.selected.push_back(static_cast<int>(best));
  sel.ensemble_map = sel.single_maps[best];

  bool improved = true;
  while (improved) {
    improved = false;
    int pick = -1;
    double pick_map = sel.ensemble_map;
    for (std::size_t m = 0; m < models.size(); ++m) {
      if (std::find(sel.selected.begin(), sel.selected.end(), static_cast<int>(m)) !=
          sel.selected.end()) {
        continue;
      }
      std::vector<int> trial = sel.selected;
      trial.push_back(static_cast<int>(m));
      const double v = map_of(trial);
      if (v > pick_map) {
        pick_map = v;
        pick = static_cast<int>(m);
      }
    }
    if (pick >= 0) {
      sel.selected.push_back(pick);
      sel.ensemble_map = pick_map;
      improved = true;
    }
  }
  return sel;
}

}  // namespace defnet
