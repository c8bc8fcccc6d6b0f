#pragma once

#include "defnet/errors.hpp"

namespace defnet {

// Quadratic deformation parameters: curvature (a1, a2), linear terms (a3, a4)
// and the anchor (b1 = row, b2 = col). The constant offset a5 completes the
// expansion of the centered quadratic into per-offset basis tables; it is the
// same at every location and is never learned.
struct QuadraticDeformation {
  double a1 = 0.0;
  double a2 = 0.0;
  double a3 = 0.0;
  double a4 = 0.0;
  int b1 = 0;
  int b2 = 0;

  double offset_a5() const {
    if (a1 <= 0.0 || a2 <= 0.0) {
      throw ParameterError("offset_a5 requires positive curvature a1, a2");
    }
    return a3 * a3 / (4.0 * a1) + a4 * a4 / (4.0 * a2);
  }
};

}  // namespace defnet
