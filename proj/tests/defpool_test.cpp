#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "defnet/defpool.hpp"
#include "defnet/rng.hpp"
#include "defnet/tensor.hpp"

using namespace defnet;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Independent brute-force oracle: enumerate every candidate offset for every
// output element and select the best by scanning a materialized list. Shares
// no code with defpool_forward.
Tensor defpool_oracle(const Tensor& m, const DefPoolConfig& cfg) {
  const std::size_t C = m.dim(0), H = m.dim(1), W = m.dim(2);
  const std::size_t oh = H / cfg.sy, ow = W / cfg.sx;
  Tensor out({C, oh, ow});
  for (std::size_t c = 0; c < C; ++c) {
    const PenaltyBasis& basis = cfg.basis_for(c);
    const std::vector<double>& a = cfg.coeffs_for(c);
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::vector<double> candidates;
        for (int dy = -basis.radius; dy <= basis.radius; ++dy) {
          for (int dx = -basis.radius; dx <= basis.radius; ++dx) {
            const int ry = static_cast<int>(oy) * cfg.sy + dy;
            const int rx = static_cast<int>(ox) * cfg.sx + dx;
            if (ry < 0 || rx < 0 || ry >= static_cast<int>(H) || rx >= static_cast<int>(W)) {
              continue;
            }
            bool forbidden = false;
            double penalty = 0.0;
            for (std::size_t n = 0; n < basis.count(); ++n) {
              const double d = basis.entry(n, dy, dx);
              if (std::isinf(d)) {
                forbidden = true;
              } else {
                penalty += a[n] * d;
              }
            }
            if (forbidden) continue;
            candidates.push_back(m.at(c, static_cast<std::size_t>(ry),
                                      static_cast<std::size_t>(rx)) -
                                 penalty);
          }
        }
        if (candidates.empty()) throw std::runtime_error("oracle: no candidate at anchor");
        double best = candidates[0];
        for (double v : candidates) best = std::max(best, v);
        out.at(c, oy, ox) = best;
      }
    }
  }
  return out;
}

Tensor random_map(std::vector<std::size_t> shape, Rng& rng) {
  Tensor t(std::move(shape));
  // three-decimal grid keeps candidate gaps well above the FD step
  for (double& v : t.data()) v = std::round(rng.uniform(0.0, 10.0) * 1000.0) / 1000.0;
  return t;
}

DefPoolConfig random_config(int radius, int stride, std::size_t n_bases, Rng& rng) {
  DefPoolConfig cfg;
  cfg.sx = stride;
  cfg.sy = stride;
  PenaltyBasis basis;
  basis.radius = radius;
  for (std::size_t n = 0; n < n_bases; ++n) {
    Tensor t = penalty_table(radius, 0.0);
    for (double& v : t.data()) v = std::round(rng.uniform(0.0, 2.0) * 1000.0) / 1000.0;
    basis.tables.push_back(std::move(t));
  }
  cfg.bases.push_back(std::move(basis));
  cfg.coeffs = {std::vector<double>()};
  for (std::size_t n = 0; n < n_bases; ++n) {
    cfg.coeffs[0].push_back(std::round(rng.uniform(0.2, 1.5) * 1000.0) / 1000.0);
  }
  return cfg;
}

// Scalar objective L = sum_e w_e * out_e used by the finite-difference check.
double weighted_forward(const Tensor& m, const DefPoolConfig& cfg, const std::vector<double>& w) {
  const Tensor out = defpool_forward(m, cfg).output;
  double loss = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) loss += w[i] * out[i];
  return loss;
}

// Smallest gap between the best and second-best candidate over all anchors;
// used to certify that the finite-difference step cannot flip an argmax.
double min_candidate_gap(const Tensor& m, const DefPoolConfig& cfg) {
  const std::size_t C = m.dim(0), H = m.dim(1), W = m.dim(2);
  const std::size_t oh = H / cfg.sy, ow = W / cfg.sx;
  double min_gap = kInf;
  for (std::size_t c = 0; c < C; ++c) {
    const PenaltyBasis& basis = cfg.basis_for(c);
    const std::vector<double>& a = cfg.coeffs_for(c);
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::vector<double> vals;
        for (int dy = -basis.radius; dy <= basis.radius; ++dy) {
          for (int dx = -basis.radius; dx <= basis.radius; ++dx) {
            const int ry = static_cast<int>(oy) * cfg.sy + dy;
            const int rx = static_cast<int>(ox) * cfg.sx + dx;
            if (ry < 0 || rx < 0 || ry >= static_cast<int>(H) || rx >= static_cast<int>(W)) {
              continue;
            }
            double penalty = 0.0;
            bool forbidden = false;
            for (std::size_t n = 0; n < basis.count(); ++n) {
              const double d = basis.entry(n, dy, dx);
              if (std::isinf(d)) forbidden = true;
              else penalty += a[n] * d;
            }
            if (!forbidden) {
              vals.push_back(m.at(c, static_cast<std::size_t>(ry), static_cast<std::size_t>(rx)) -
                             penalty);
            }
          }
        }
        if (vals.size() < 2) continue;
        std::sort(vals.begin(), vals.end(), std::greater<double>());
        min_gap = std::min(min_gap, vals[0] - vals[1]);
      }
    }
  }
  return min_gap;
}

struct FdErrors {
  double coeffs = 0.0;
  double input = 0.0;
};

// Relative error with an absolute floor. Central differences carry
// cancellation noise of about eps_machine * |L| / step (~1e-10 here), so a
// difference below 1e-8 is indistinguishable from an exact match and must not
// be divided by a tiny gradient scale.
double rel_err(double analytic, double numeric) {
  const double diff = std::abs(analytic - numeric);
  if (diff < 1e-8) return 0.0;
  return diff / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

FdErrors finite_difference_errors(Tensor m, DefPoolConfig cfg, Rng& rng, double eps = 1e-5) {
  DefPoolResult fwd = defpool_forward(m, cfg);
  std::vector<double> w(fwd.output.size());
  for (double& v : w) v = rng.uniform(-1.0, 1.0);

  Tensor grad_out(fwd.output.shape());
  for (std::size_t i = 0; i < w.size(); ++i) grad_out[i] = w[i];
  DefPoolGrads grads = defpool_backward(grad_out, fwd.record, cfg);

  FdErrors errs;
  for (std::size_t row = 0; row < cfg.coeffs.size(); ++row) {
    for (std::size_t n = 0; n < cfg.coeffs[row].size(); ++n) {
      const double keep = cfg.coeffs[row][n];
      cfg.coeffs[row][n] = keep + eps;
      const double lp = weighted_forward(m, cfg, w);
      cfg.coeffs[row][n] = keep - eps;
      const double lm = weighted_forward(m, cfg, w);
      cfg.coeffs[row][n] = keep;
      errs.coeffs = std::max(errs.coeffs, rel_err(grads.coeffs[row][n], (lp - lm) / (2 * eps)));
    }
  }
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double keep = m[i];
    m[i] = keep + eps;
    const double lp = weighted_forward(m, cfg, w);
    m[i] = keep - eps;
    const double lm = weighted_forward(m, cfg, w);
    m[i] = keep;
    errs.input = std::max(errs.input, rel_err(grads.input[i], (lp - lm) / (2 * eps)));
  }
  return errs;
}

}  // namespace

// --- forward -----------------------------------------------------------------

TEST(DefPoolForward, RadiusZeroIsPenalizedSubsample) {
  Rng rng(17);
  Tensor m = random_map({2, 6, 6}, rng);
  DefPoolConfig cfg = random_config(/*radius=*/0, /*stride=*/2, /*n_bases=*/3, rng);
  DefPoolResult res = defpool_forward(m, cfg);
  ASSERT_EQ(res.output.shape(), (std::vector<std::size_t>{2, 3, 3}));
  for (std::size_t c = 0; c < 2; ++c) {
    double penalty = 0.0;
    for (std::size_t n = 0; n < 3; ++n) {
      penalty += cfg.coeffs[0][n] * cfg.bases[0].entry(n, 0, 0);
    }
    for (std::size_t oy = 0; oy < 3; ++oy) {
      for (std::size_t ox = 0; ox < 3; ++ox) {
        EXPECT_DOUBLE_EQ(res.output.at(c, oy, ox), m.at(c, oy * 2, ox * 2) - penalty);
      }
    }
  }
}

TEST(DefPoolForward, RampMapMatchesNineOffsetScan) {
  Tensor m({1, 5, 5});
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 5; ++j) m.at(0, i, j) = static_cast<double>(i + j);
  }
  DefPoolConfig cfg;
  cfg.sx = 2;
  cfg.sy = 2;
  PenaltyBasis basis;
  basis.radius = 1;
  Tensor d = penalty_table(1, 0.0);
  for (int dy = -1; dy <= 1; ++dy) {
    for (int dx = -1; dx <= 1; ++dx) {
      d.at(0, dy + 1, dx + 1) = std::abs(dx) + std::abs(dy);
    }
  }
  basis.tables.push_back(d);
  cfg.bases.push_back(basis);
  cfg.coeffs = {{1.0}};

  Tensor got = defpool_forward(m, cfg).output;
  Tensor want = defpool_oracle(m, cfg);
  ASSERT_EQ(got.shape(), want.shape());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_EQ(got[i], want[i]);
}

TEST(DefPoolForward, BruteForceEquivalenceOverConfigGrid) {
  Rng rng(99);
  for (int radius : {0, 1, 2}) {
    for (int stride : {1, 2, 3}) {
      for (std::size_t n : {std::size_t{1}, std::size_t{4}}) {
        Tensor m = random_map({2, 9, 8}, rng);
        DefPoolConfig cfg = random_config(radius, stride, n, rng);
        Tensor got = defpool_forward(m, cfg).output;
        Tensor want = defpool_oracle(m, cfg);
        ASSERT_EQ(got.shape(), want.shape());
        for (std::size_t i = 0; i < got.size(); ++i) {
          ASSERT_EQ(got[i], want[i]) << "radius=" << radius << " stride=" << stride << " n=" << n;
        }
      }
    }
  }
}

TEST(DefPoolForward, TieBreaksTowardSmallestOffset) {
  // constant map: every offset ties; the record must pick (-R,-R)
  Tensor m({1, 5, 5}, 2.0);
  DefPoolConfig cfg = make_maxpool_basis(1);
  cfg.sx = cfg.sy = 2;
  DefPoolResult res = defpool_forward(m, cfg);
  for (double v : res.output.data()) EXPECT_DOUBLE_EQ(v, 2.0);
  // interior anchor (2,2): full window available
  const ArgmaxEntry& e = res.record.at(0, 1, 1);
  EXPECT_EQ(e.dy, -1);
  EXPECT_EQ(e.dx, -1);
}

TEST(DefPoolForward, RecordReproducesOutputExactly) {
  Rng rng(31);
  Tensor m = random_map({3, 7, 9}, rng);
  DefPoolConfig cfg = random_config(2, 2, 4, rng);
  DefPoolResult res = defpool_forward(m, cfg);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t oy = 0; oy < res.record.out_h; ++oy) {
      for (std::size_t ox = 0; ox < res.record.out_w; ++ox) {
        const ArgmaxEntry& e = res.record.at(c, oy, ox);
        ASSERT_LT(e.src, m.size());
        double penalty = 0.0;
        for (std::size_t n = 0; n < cfg.bases[0].count(); ++n) {
          penalty += cfg.coeffs[0][n] * cfg.bases[0].entry(n, e.dy, e.dx);
        }
        EXPECT_EQ(m[e.src] - penalty, res.output.at(c, oy, ox));
      }
    }
  }
}

TEST(DefPoolForward, StrideBeyondMapThrowsConfigError) {
  Tensor m({1, 3, 3});
  DefPoolConfig cfg = make_maxpool_basis(1);
  cfg.sx = 4;
  cfg.sy = 1;
  EXPECT_THROW(defpool_forward(m, cfg), ConfigError);
}

TEST(DefPoolForward, AllOffsetsExcludedThrowsDegenerateError) {
  Tensor m({1, 3, 3}, 1.0);
  DefPoolConfig cfg;
  PenaltyBasis basis;
  basis.radius = 1;
  basis.tables.push_back(penalty_table(1, kInf));  // every offset forbidden
  cfg.bases.push_back(basis);
  cfg.coeffs = {{1.0}};
  EXPECT_THROW(defpool_forward(m, cfg), DegeneratePenaltyError);
}

TEST(DefPoolForward, NanPenaltyRejected) {
  DefPoolConfig cfg = make_maxpool_basis(1);
  cfg.bases[0].tables[0].at(0, 0, 0) = std::numeric_limits<double>::quiet_NaN();
  Tensor m({1, 4, 4});
  EXPECT_THROW(defpool_forward(m, cfg), ParameterError);
}

// --- backward ----------------------------------------------------------------

TEST(DefPoolBackward, ZeroUpstreamGivesZeroGrads) {
  Rng rng(55);
  Tensor m = random_map({2, 6, 6}, rng);
  DefPoolConfig cfg = random_config(1, 2, 2, rng);
  DefPoolResult res = defpool_forward(m, cfg);
  Tensor grad_out(res.output.shape());
  DefPoolGrads g = defpool_backward(grad_out, res.record, cfg);
  for (double v : g.input.data()) EXPECT_DOUBLE_EQ(v, 0.0);
  for (const auto& row : g.coeffs) {
    for (double v : row) EXPECT_DOUBLE_EQ(v, 0.0);
  }
}

TEST(DefPoolBackward, SingleElementBpRule) {
  // one output element, grad 1, chosen offset has d = 0.7 -> dL/da = -0.7
  Tensor m({1, 1, 1}, std::vector<double>{5.0});
  DefPoolConfig cfg;
  PenaltyBasis basis;
  basis.radius = 0;
  basis.tables.push_back(penalty_table(0, 0.7));
  cfg.bases.push_back(basis);
  cfg.coeffs = {{1.0}};
  DefPoolResult res = defpool_forward(m, cfg);
  EXPECT_DOUBLE_EQ(res.output[0], 5.0 - 0.7);

  Tensor grad_out({1, 1, 1}, std::vector<double>{1.0});
  DefPoolGrads g = defpool_backward(grad_out, res.record, cfg);
  EXPECT_DOUBLE_EQ(g.coeffs[0][0], -0.7);
  EXPECT_DOUBLE_EQ(g.input[0], 1.0);
}

TEST(DefPoolBackward, GradAccumulatesWhenOutputsShareSource) {
  // radius 1 window, stride 1: neighboring anchors can pick the same peak
  Tensor m({1, 1, 3}, std::vector<double>{0.0, 10.0, 0.0});
  DefPoolConfig cfg = make_maxpool_basis(1);
  DefPoolResult res = defpool_forward(m, cfg);
  ASSERT_EQ(res.output.size(), 3u);
  for (double v : res.output.data()) EXPECT_DOUBLE_EQ(v, 10.0);
  Tensor grad_out({1, 1, 3}, std::vector<double>{1.0, 1.0, 1.0});
  DefPoolGrads g = defpool_backward(grad_out, res.record, cfg);
  EXPECT_DOUBLE_EQ(g.input[1], 3.0);
  EXPECT_DOUBLE_EQ(g.input[0], 0.0);
  EXPECT_DOUBLE_EQ(g.input[2], 0.0);
}

TEST(DefPoolBackward, ShapeMismatchThrows) {
  Rng rng(77);
  Tensor m = random_map({1, 4, 4}, rng);
  DefPoolConfig cfg = random_config(1, 2, 1, rng);
  DefPoolResult res = defpool_forward(m, cfg);
  Tensor bad({1, 3, 3});
  EXPECT_THROW(defpool_backward(bad, res.record, cfg), DimensionError);
}

TEST(DefPoolBackward, MatchesCentralFiniteDifferencesOverGrid) {
  Rng rng(2024);
  for (int radius : {0, 1, 2}) {
    for (int stride : {1, 2, 3}) {
      for (std::size_t n : {std::size_t{1}, std::size_t{4}}) {
        // regenerate until argmax margins are safely above the FD step
        Tensor m;
        DefPoolConfig cfg;
        double gap = 0.0;
        for (int attempt = 0; attempt < 50; ++attempt) {
          m = random_map({2, 7, 7}, rng);
          cfg = random_config(radius, stride, n, rng);
          gap = min_candidate_gap(m, cfg);
          if (gap > 1e-3) break;
        }
        ASSERT_GT(gap, 1e-3) << "could not find a tie-free instance";
        FdErrors errs = finite_difference_errors(m, cfg, rng);
        EXPECT_LT(errs.coeffs, 1e-6) << "radius=" << radius << " stride=" << stride << " n=" << n;
        EXPECT_LT(errs.input, 1e-6) << "radius=" << radius << " stride=" << stride << " n=" << n;
      }
    }
  }
}

TEST(DefPoolBackward, PerChannelCoeffRowsGetPerChannelGrads) {
  Rng rng(4);
  Tensor m = random_map({3, 6, 6}, rng);
  DefPoolConfig cfg = random_config(1, 2, 2, rng);
  cfg.expand_coeffs(3);
  ASSERT_EQ(cfg.coeffs.size(), 3u);
  DefPoolResult res = defpool_forward(m, cfg);
  Tensor grad_out(res.output.shape(), 1.0);
  DefPoolGrads g = defpool_backward(grad_out, res.record, cfg);
  ASSERT_EQ(g.coeffs.size(), 3u);
  // gradient for channel c only reflects channel c's argmax choices
  for (std::size_t c = 0; c < 3; ++c) {
    double want = 0.0;
    for (std::size_t oy = 0; oy < res.record.out_h; ++oy) {
      for (std::size_t ox = 0; ox < res.record.out_w; ++ox) {
        const ArgmaxEntry& e = res.record.at(c, oy, ox);
        want += -cfg.bases[0].entry(0, e.dy, e.dx);
      }
    }
    EXPECT_DOUBLE_EQ(g.coeffs[c][0], want);
  }
}

// --- named constructors --------------------------------------------------------

TEST(MaxPoolBasis, MatchesMaxPoolThroughCenterCropAtStrideOne) {
  // For |d| <= k windows at stride 1, the interior of the def-pool output is
  // exactly conventional max-pooling with kernel 2k+1, stride 1.
  Rng rng(12);
  for (int k : {1, 2}) {
    Tensor m = random_map({2, 9, 11}, rng);
    DefPoolConfig cfg = make_maxpool_basis(k);
    Tensor got = defpool_forward(m, cfg).output;
    MaxPoolResult want = max_pool(m, 2 * k + 1, 1);
    for (std::size_t c = 0; c < 2; ++c) {
      for (std::size_t oy = 0; oy < want.output.dim(1); ++oy) {
        for (std::size_t ox = 0; ox < want.output.dim(2); ++ox) {
          ASSERT_EQ(got.at(c, oy + k, ox + k), want.output.at(c, oy, ox));
        }
      }
    }
  }
}

TEST(MaxPoolBasis, RadiusZeroIsIdentitySubsample) {
  Rng rng(13);
  Tensor m = random_map({1, 6, 9}, rng);
  DefPoolConfig cfg = make_maxpool_basis(0);
  cfg.sx = 3;
  cfg.sy = 2;
  Tensor got = defpool_forward(m, cfg).output;
  ASSERT_EQ(got.shape(), (std::vector<std::size_t>{1, 3, 3}));
  for (std::size_t oy = 0; oy < 3; ++oy) {
    for (std::size_t ox = 0; ox < 3; ++ox) {
      EXPECT_EQ(got.at(0, oy, ox), m.at(0, oy * 2, ox * 3));
    }
  }
}

TEST(MaxPoolBasis, ConstantMapStaysConstant) {
  Tensor m({2, 8, 8}, -1.5);
  DefPoolConfig cfg = make_maxpool_basis(2);
  cfg.sx = cfg.sy = 2;
  Tensor out = defpool_forward(m, cfg).output;
  for (double v : out.data()) EXPECT_DOUBLE_EQ(v, -1.5);
}

TEST(BlockBasis, BitIdenticalToNonOverlappingMaxPool) {
  Rng rng(14);
  for (int k : {2, 3}) {
    for (std::size_t h : {6u, 7u, 9u}) {
      Tensor m = random_map({2, h, h + 1}, rng);
      DefPoolConfig cfg = make_block_basis(k);
      Tensor got = defpool_forward(m, cfg).output;
      MaxPoolResult want = max_pool(m, static_cast<std::size_t>(k), static_cast<std::size_t>(k));
      ASSERT_EQ(got.shape(), want.output.shape());
      for (std::size_t i = 0; i < got.size(); ++i) ASSERT_EQ(got[i], want.output[i]);
    }
  }
}

TEST(GlobalBasis, ZeroPenaltyGivesChannelMax) {
  Rng rng(15);
  Tensor m = random_map({3, 5, 8}, rng);
  DefPoolConfig cfg = make_global_basis(5, 8);
  Tensor out = defpool_forward(m, cfg).output;
  ASSERT_EQ(out.shape(), (std::vector<std::size_t>{3, 1, 1}));
  for (std::size_t c = 0; c < 3; ++c) {
    double best = m.at(c, 0, 0);
    for (std::size_t i = 0; i < 5; ++i) {
      for (std::size_t j = 0; j < 8; ++j) best = std::max(best, m.at(c, i, j));
    }
    EXPECT_EQ(out.at(c, 0, 0), best);
  }
}

TEST(GlobalBasis, AllForbiddenButAnchorPicksAnchor) {
  Rng rng(16);
  Tensor m = random_map({1, 4, 6}, rng);
  DefPoolConfig cfg = make_global_basis(4, 6);
  for (double& v : cfg.bases[0].tables[0].data()) v = kInf;
  const int r = cfg.bases[0].radius;
  cfg.bases[0].tables[0].at(0, r, r) = 0.0;  // offset (0,0) only
  Tensor out = defpool_forward(m, cfg).output;
  EXPECT_EQ(out.at(0, 0, 0), m.at(0, 0, 0));
}

TEST(DirectionalBasis, LeftRightCostsFollowTheTable) {
  // cost 1 for moving the part leftward (dx < 0), 2 rightward (dx > 0),
  // vertical moves forbidden
  Tensor d({1, 3, 3}, kInf);
  d.at(0, 1, 0) = 1.0;
  d.at(0, 1, 1) = 0.0;
  d.at(0, 1, 2) = 2.0;
  PenaltyBasis basis = make_directional_basis(d);
  EXPECT_FALSE(basis.learnable);

  DefPoolConfig cfg;  // stride 1: the output element (1,1) has a full window
  cfg.bases.push_back(basis);
  cfg.coeffs = {{1.0}};

  // peak one column left of the anchor (1,1) -> scored m - 1
  Tensor left({1, 3, 3}, 0.0);
  left.at(0, 1, 0) = 5.0;
  EXPECT_DOUBLE_EQ(defpool_forward(left, cfg).output.at(0, 1, 1), 4.0);

  // peak one column right of the anchor -> scored m - 2
  Tensor right({1, 3, 3}, 0.0);
  right.at(0, 1, 2) = 5.0;
  EXPECT_DOUBLE_EQ(defpool_forward(right, cfg).output.at(0, 1, 1), 3.0);
}

TEST(DirectionalBasis, ZeroTableIsPlainWindowMax) {
  Rng rng(18);
  Tensor m = random_map({1, 6, 6}, rng);
  DefPoolConfig cfg;
  cfg.sx = cfg.sy = 2;
  cfg.bases.push_back(make_directional_basis(penalty_table(1, 0.0)));
  cfg.coeffs = {{1.0}};
  DefPoolConfig zero = make_maxpool_basis(1);
  zero.sx = zero.sy = 2;
  Tensor a = defpool_forward(m, cfg).output;
  Tensor b = defpool_forward(m, zero).output;
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(DirectionalBasis, UniqueZeroOffsetShiftsTheMap) {
  Rng rng(19);
  Tensor m = random_map({1, 4, 6}, rng);
  Tensor d({1, 3, 3}, kInf);
  d.at(0, 1, 2) = 0.0;  // only offset (dy=0, dx=+1) allowed
  DefPoolConfig cfg;
  cfg.sx = 2;  // anchors at even columns keep the shifted source in bounds
  cfg.bases.push_back(make_directional_basis(d));
  cfg.coeffs = {{1.0}};
  Tensor out = defpool_forward(m, cfg).output;
  ASSERT_EQ(out.shape(), (std::vector<std::size_t>{1, 4, 3}));
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_EQ(out.at(0, i, j), m.at(0, i, 2 * j + 1));
    }
  }

  // at stride 1 the rightmost anchor has no in-bounds allowed offset left
  DefPoolConfig tight = cfg;
  tight.sx = 1;
  EXPECT_THROW(defpool_forward(m, tight), DegeneratePenaltyError);
}

TEST(DirectionalBasis, EvenMapRejected) {
  EXPECT_THROW(make_directional_basis(Tensor({4, 4}, 0.0)), ParameterError);
  EXPECT_THROW(make_directional_basis(Tensor({3, 5}, 0.0)), ParameterError);
}

TEST(QuadraticBasis, HugeCurvaturePinsOutputToAnchor) {
  Rng rng(20);
  Tensor m = random_map({1, 7, 7}, rng);
  QuadraticDeformation q{1e12, 1e12, 0.0, 0.0, 3, 4};
  DefPoolConfig cfg = make_quadratic_basis(q, 7, 7);
  Tensor out = defpool_forward(m, cfg).output;
  EXPECT_DOUBLE_EQ(out[0], m.at(0, 3, 4));
}

TEST(QuadraticBasis, AllZeroCoefficientsGiveGlobalMax) {
  Rng rng(22);
  Tensor m = random_map({1, 6, 9}, rng);
  QuadraticDeformation q{0.0, 0.0, 0.0, 0.0, 2, 2};
  DefPoolConfig cfg = make_quadratic_basis(q, 6, 9);
  double best = m[0];
  for (double v : m.data()) best = std::max(best, v);
  EXPECT_DOUBLE_EQ(defpool_forward(m, cfg).output[0], best);
}

TEST(QuadraticBasis, OffsetA5RequiresPositiveCurvature) {
  QuadraticDeformation q{0.0, 1.0, 0.5, 0.5, 1, 1};
  EXPECT_THROW(q.offset_a5(), ParameterError);
  QuadraticDeformation ok{2.0, 0.5, 1.0, -1.0, 1, 1};
  EXPECT_DOUBLE_EQ(ok.offset_a5(), 1.0 / 8.0 + 1.0 / 2.0);
}

TEST(QuadraticBasis, AnchorOutsideMapRejected) {
  QuadraticDeformation q{1.0, 1.0, 0.0, 0.0, 9, 1};
  EXPECT_THROW(make_quadratic_basis(q, 5, 5), ParameterError);
}

// --- properties ---------------------------------------------------------------

TEST(DefPoolProperties, MaxPoolEquivalenceOverRandomMaps) {
  Rng rng(101);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t c = 1 + rng.uniform_int(std::uint64_t{3});
    const std::size_t h = 5 + rng.uniform_int(std::uint64_t{12});
    const std::size_t w = 5 + rng.uniform_int(std::uint64_t{12});
    const int k = 1 + static_cast<int>(rng.uniform_int(std::uint64_t{2}));
    Tensor m = random_map({c, h, w}, rng);
    Tensor pooled = defpool_forward(m, make_maxpool_basis(k)).output;
    MaxPoolResult ref = max_pool(m, static_cast<std::size_t>(2 * k + 1), 1);
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t oy = 0; oy < ref.output.dim(1); ++oy) {
        for (std::size_t ox = 0; ox < ref.output.dim(2); ++ox) {
          ASSERT_EQ(pooled.at(ch, oy + k, ox + k), ref.output.at(ch, oy, ox));
        }
      }
    }
  }
}

TEST(DefPoolProperties, RaisingAPenaltyNeverRaisesAnOutput) {
  Rng rng(33);
  Tensor m = random_map({2, 8, 8}, rng);
  DefPoolConfig cfg = random_config(2, 2, 2, rng);
  Tensor base = defpool_forward(m, cfg).output;
  for (int trial = 0; trial < 30; ++trial) {
    DefPoolConfig bumped = cfg;
    Tensor& table = bumped.bases[0].tables[rng.uniform_int(std::uint64_t{2})];
    const std::size_t cell = rng.uniform_int(table.size());
    table[cell] += rng.uniform(0.1, 2.0);
    Tensor out = defpool_forward(m, bumped).output;
    for (std::size_t i = 0; i < out.size(); ++i) {
      EXPECT_LE(out[i], base[i] + 1e-15);
    }
  }
}

TEST(DefPoolProperties, OutputsNeverExceedChannelMaxAndMeetItWhenFree) {
  Rng rng(34);
  Tensor m = random_map({2, 6, 6}, rng);
  // nonnegative penalties keep every output at or below the channel max
  DefPoolConfig cfg = random_config(1, 2, 2, rng);
  Tensor out = defpool_forward(m, cfg).output;
  for (std::size_t c = 0; c < 2; ++c) {
    double best = m.at(c, 0, 0);
    for (std::size_t i = 0; i < 6; ++i) {
      for (std::size_t j = 0; j < 6; ++j) best = std::max(best, m.at(c, i, j));
    }
    for (std::size_t oy = 0; oy < out.dim(1); ++oy) {
      for (std::size_t ox = 0; ox < out.dim(2); ++ox) {
        EXPECT_LE(out.at(c, oy, ox), best);
      }
    }
    // with zero penalty and a window covering the map, equality holds
    DefPoolConfig free = make_global_basis(6, 6);
    EXPECT_EQ(defpool_forward(m, free).output.at(c, 0, 0), best);
  }
}

TEST(DefPoolProperties, UniformPenaltyShiftMovesOutputsKeepsArgmax) {
  Rng rng(35);
  Tensor m = random_map({2, 8, 8}, rng);
  DefPoolConfig cfg = random_config(2, 2, 2, rng);
  cfg.expand_coeffs(2);
  DefPoolResult base = defpool_forward(m, cfg);

  const double shift = 0.625;  // exactly representable
  DefPoolConfig shifted = cfg;
  for (double& v : shifted.bases[0].tables[1].data()) v += shift;
  DefPoolResult moved = defpool_forward(m, shifted);

  ASSERT_EQ(base.record.entries.size(), moved.record.entries.size());
  for (std::size_t i = 0; i < base.record.entries.size(); ++i) {
    EXPECT_EQ(base.record.entries[i].dx, moved.record.entries[i].dx);
    EXPECT_EQ(base.record.entries[i].dy, moved.record.entries[i].dy);
    EXPECT_EQ(base.record.entries[i].src, moved.record.entries[i].src);
  }
  std::size_t pos = 0;
  for (std::size_t c = 0; c < 2; ++c) {
    const double delta = cfg.coeffs[c][1] * shift;
    for (std::size_t e = 0; e < base.record.out_h * base.record.out_w; ++e, ++pos) {
      EXPECT_NEAR(moved.output[pos], base.output[pos] - delta, 1e-12);
    }
  }
}

// --- serialization -------------------------------------------------------------

TEST(DefPoolJson, RoundTripPreservesInfAndBehavior) {
  Rng rng(66);
  Tensor m = random_map({2, 6, 6}, rng);
  DefPoolConfig cfg = random_config(1, 2, 2, rng);
  cfg.bases[0].tables[0].at(0, 0, 0) = kInf;
  cfg.bases[0].tables[1].at(0, 2, 2) = kInf;
  cfg.expand_coeffs(2);

  nlohmann::json j = defpool_config_to_json(cfg);
  EXPECT_EQ(j["d_tables"][0][0][0][0], "inf");
  DefPoolConfig back = defpool_config_from_json(j);

  EXPECT_EQ(back.sx, cfg.sx);
  EXPECT_EQ(back.sy, cfg.sy);
  EXPECT_EQ(back.shared_basis, cfg.shared_basis);
  EXPECT_EQ(back.coeffs, cfg.coeffs);
  ASSERT_EQ(back.bases[0].count(), cfg.bases[0].count());
  for (std::size_t n = 0; n < cfg.bases[0].count(); ++n) {
    EXPECT_EQ(back.bases[0].tables[n], cfg.bases[0].tables[n]);
  }

  Tensor a = defpool_forward(m, cfg).output;
  Tensor b = defpool_forward(m, back).output;
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);

  // a second trip through text produces the same document
  EXPECT_EQ(defpool_config_to_json(back).dump(), j.dump());
}
