#include <gtest/gtest.h>

#include <cmath>

#include "defnet/defpool.hpp"
#include "defnet/dpm_oracle.hpp"
#include "defnet/rng.hpp"

using namespace defnet;

namespace {

Tensor random_map(std::size_t h, std::size_t w, Rng& rng) {
  Tensor t({1, h, w});
  for (double& v : t.data()) v = rng.uniform(-5.0, 5.0);
  return t;
}

QuadraticDeformation random_quadratic(std::size_t h, std::size_t w, Rng& rng) {
  QuadraticDeformation q;
  q.a1 = rng.uniform(0.05, 2.0);
  q.a2 = rng.uniform(0.05, 2.0);
  q.a3 = rng.uniform(-1.0, 1.0);
  q.a4 = rng.uniform(-1.0, 1.0);
  q.b1 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(h)));
  q.b2 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(w)));
  return q;
}

// Separate evaluation of the expanded (basis-table) form, used to validate
// the algebraic rewriting of the centered quadratic.
double expanded_form(double m, int i, int j, const QuadraticDeformation& q) {
  const double d1 = (i - q.b1) * static_cast<double>(i - q.b1);
  const double d2 = (j - q.b2) * static_cast<double>(j - q.b2);
  const double d3 = i - q.b1;
  const double d4 = j - q.b2;
  const double a5 = q.a3 * q.a3 / (4.0 * q.a1) + q.a4 * q.a4 / (4.0 * q.a2);
  return m - q.a1 * d1 - q.a2 * d2 - q.a3 * d3 - q.a4 * d4 - a5;
}

}  // namespace

TEST(DpmPenalizedMap, ZeroParametersLeaveMapUntouched) {
  Rng rng(1);
  Tensor m = random_map(5, 4, rng);
  QuadraticDeformation q{0.0, 0.0, 0.0, 0.0, 2, 2};
  Tensor out = dpm_penalized_map(m, q);
  for (std::size_t i = 0; i < m.size(); ++i) EXPECT_DOUBLE_EQ(out[i], m[i]);
}

TEST(DpmPenalizedMap, ParabolaVertexHasZeroPenalty) {
  Rng rng(2);
  Tensor m = random_map(7, 7, rng);
  // shifts a3/(2 a1) = -1 and a4/(2 a2) = -2 land the vertex on the integer
  // point (b1 + 1, b2 + 2)
  QuadraticDeformation q{1.0, 1.0, -2.0, -4.0, 2, 1};
  Tensor out = dpm_penalized_map(m, q);
  EXPECT_DOUBLE_EQ(out.at(0, 3, 3), m.at(0, 3, 3));
  // everywhere else the penalty is strictly positive
  for (std::size_t i = 0; i < 7; ++i) {
    for (std::size_t j = 0; j < 7; ++j) {
      if (i == 3 && j == 3) continue;
      EXPECT_LT(out.at(0, i, j), m.at(0, i, j));
    }
  }
}

TEST(DpmPenalizedMap, CenteredAndExpandedFormsAgree) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor m = random_map(7, 7, rng);
    QuadraticDeformation q = random_quadratic(7, 7, rng);
    Tensor centered = dpm_penalized_map(m, q);
    for (std::size_t i = 0; i < 7; ++i) {
      for (std::size_t j = 0; j < 7; ++j) {
        const double want =
            expanded_form(m.at(0, i, j), static_cast<int>(i), static_cast<int>(j), q);
        EXPECT_NEAR(centered.at(0, i, j), want, 1e-12);
      }
    }
  }
}

TEST(DpmPenalizedMap, InvalidParametersRejected) {
  Tensor m({1, 4, 4});
  EXPECT_THROW(dpm_penalized_map(m, QuadraticDeformation{1, 1, 0, 0, 5, 0}), ParameterError);
  EXPECT_THROW(dpm_penalized_map(m, QuadraticDeformation{0, 1, 1, 0, 0, 0}), ParameterError);
  EXPECT_THROW(dpm_penalized_map(Tensor({2, 4, 4}), QuadraticDeformation{}), DimensionError);
}

TEST(DpmScore, ConstantMapZeroPenalty) {
  Tensor m({1, 5, 5}, 2.25);
  QuadraticDeformation q{0.0, 0.0, 0.0, 0.0, 2, 2};
  EXPECT_DOUBLE_EQ(dpm_score(m, q), 2.25);
}

TEST(DpmScore, DeltaMapWithStiffPenaltyScoresTheSpike) {
  Tensor m({1, 5, 5}, 0.0);
  m.at(0, 2, 3) = 1.0;
  QuadraticDeformation q{1e9, 1e9, 0.0, 0.0, 2, 3};
  EXPECT_NEAR(dpm_score(m, q), 1.0, 1e-12);
}

TEST(DpmScore, AddingAConstantShiftsTheScoreByExactlyThatConstant) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor m = random_map(6, 8, rng);
    QuadraticDeformation q = random_quadratic(6, 8, rng);
    const double c = rng.uniform(-3.0, 3.0);
    Tensor shifted = m;
    for (double& v : shifted.data()) v += c;
    EXPECT_NEAR(dpm_score(shifted, q), dpm_score(m, q) + c, 1e-12);
  }
}

TEST(DpmScore, NeverExceedsGlobalMax) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor m = random_map(7, 7, rng);
    QuadraticDeformation q = random_quadratic(7, 7, rng);
    double best = m[0];
    for (double v : m.data()) best = std::max(best, v);
    EXPECT_LE(dpm_score(m, q), best + 1e-12);
  }
}

TEST(DpmScore, MatchesQuadraticDefPoolWithA5Offset) {
  // the whole purpose of this module: the def-pool global quadratic config
  // reproduces the brute-force score once the constant a5 is folded back in
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t h = 5 + rng.uniform_int(std::uint64_t{5});
    const std::size_t w = 5 + rng.uniform_int(std::uint64_t{5});
    Tensor m = random_map(h, w, rng);
    QuadraticDeformation q = random_quadratic(h, w, rng);
    DefPoolConfig cfg = make_quadratic_basis(q, h, w);
    const double pooled = defpool_forward(m, cfg).output[0];
    EXPECT_NEAR(pooled - q.offset_a5(), dpm_score(m, q), 1e-9);
  }
}
