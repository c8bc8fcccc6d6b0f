#pragma once

#include "defnet/errors.hpp"
#include "defnet/quadratic_deformation.hpp"
#include "defnet/tensor.hpp"

namespace defnet {

// Brute-force quadratic deformation scoring, kept as ground truth for the
// def-pooling equivalence tests. Deliberately shares no computation code with
// defpool_forward: plain loops over (i = row, j = col) and the centered
// quadratic written out directly.

inline Tensor dpm_penalized_map(const Tensor& m, const QuadraticDeformation& q) {
  if (m.rank() != 3 || m.dim(0) != 1) throw DimensionError("expected a [1,H,W] map");
  const std::size_t h = m.dim(1), w = m.dim(2);
  if (q.b1 < 0 || q.b1 >= static_cast<int>(h) || q.b2 < 0 || q.b2 >= static_cast<int>(w)) {
    throw ParameterError("anchor (b1,b2) must lie inside the map");
  }
  // The centered form divides by the curvature; a vanishing curvature is only
  // meaningful when the matching linear term vanishes too (zero cost).
  if ((q.a1 == 0.0 && q.a3 != 0.0) || (q.a2 == 0.0 && q.a4 != 0.0)) {
    throw ParameterError("zero curvature with a nonzero linear term");
  }
  const double shift1 = q.a1 != 0.0 ? q.a3 / (2.0 * q.a1) : 0.0;
  const double shift2 = q.a2 != 0.0 ? q.a4 / (2.0 * q.a2) : 0.0;

  Tensor out({1, h, w});
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const double ti = static_cast<double>(i) - q.b1 + shift1;
      const double tj = static_cast<double>(j) - q.b2 + shift2;
      out.at(0, i, j) = m.at(0, i, j) - q.a1 * ti * ti - q.a2 * tj * tj;
    }
  }
  return out;
}

inline double dpm_score(const Tensor& m, const QuadraticDeformation& q) {
  const Tensor penalized = dpm_penalized_map(m, q);
  double best = penalized[0];
  for (double v : penalized.data()) {
    if (v > best) best = v;
  }
  return best;
}

}  // namespace defnet
