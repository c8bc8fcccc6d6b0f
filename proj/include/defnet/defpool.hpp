#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "defnet/errors.hpp"
#include "defnet/quadratic_deformation.hpp"
#include "defnet/tensor.hpp"

namespace defnet {

// Deformation-constrained pooling.
//
// Each output element is the maximum, over offsets (dx, dy) in a
// (2R+1) x (2R+1) window around the anchor (sx*x, sy*y), of the map value at
// the displaced position minus a penalty sum_n a_n * d_n(dx, dy). The d
// tables are predefined constants; the coefficients a may be learned.
//
// Offsets whose displaced position falls outside the map are excluded from
// the max. Offsets where any d table holds +inf are excluded before any
// arithmetic (so no inf-inf or 0*inf is ever formed). Ties are broken toward
// the smallest (dy, dx) in lexicographic order.

constexpr double kInfPenalty = std::numeric_limits<double>::infinity();

// Per-offset penalty tables shared by one or more channels. N tables of size
// (2R+1) x (2R+1); entries are finite or +inf, never NaN.
struct PenaltyBasis {
  int radius = 0;                // R
  std::vector<Tensor> tables;    // N tables, each rank-2 (2R+1) x (2R+1)
  bool learnable = true;         // false pins the coefficients (a = 1)

  std::size_t count() const { return tables.size(); }
  std::size_t width() const { return static_cast<std::size_t>(2 * radius + 1); }

  double entry(std::size_t n, int dy, int dx) const {
    return tables[n].at(0, static_cast<std::size_t>(dy + radius),
                        static_cast<std::size_t>(dx + radius));
  }

  void validate() const {
    if (radius < 0) throw ParameterError("penalty radius must be >= 0");
    if (tables.empty()) throw ParameterError("penalty basis needs at least one table");
    for (const Tensor& t : tables) {
      if (t.rank() != 3 || t.dim(0) != 1 || t.dim(1) != width() || t.dim(2) != width()) {
        throw DimensionError("penalty table must be [1, 2R+1, 2R+1]");
      }
      for (double v : t.data()) {
        if (std::isnan(v)) throw ParameterError("penalty table entry is NaN");
        if (std::isinf(v) && v < 0) throw ParameterError("penalty table entry is -inf");
      }
    }
  }
};

inline Tensor penalty_table(int radius, double fill = 0.0) {
  const std::size_t w = static_cast<std::size_t>(2 * radius + 1);
  return Tensor({1, w, w}, fill);
}

struct DefPoolConfig {
  int sx = 1;
  int sy = 1;
  bool shared_basis = true;            // one basis for all channels
  std::vector<PenaltyBasis> bases;     // 1 if shared, else one per channel
  // Learnable coefficients a[c][n]. A single row is broadcast over channels.
  std::vector<std::vector<double>> coeffs;

  const PenaltyBasis& basis_for(std::size_t c) const {
    return shared_basis ? bases[0] : bases[c];
  }
  const std::vector<double>& coeffs_for(std::size_t c) const {
    return coeffs.size() == 1 ? coeffs[0] : coeffs[c];
  }

  void validate(std::size_t channels) const {
    if (sx < 1 || sy < 1) throw ParameterError("subsampling steps must be >= 1");
    if (bases.empty()) throw ConfigError("def-pool config has no basis");
    if (shared_basis) {
      if (bases.size() != 1) throw ConfigError("shared basis config must hold one basis");
    } else if (bases.size() != channels) {
      throw ConfigError("per-channel bases must match channel count");
    }
    if (coeffs.size() != 1 && coeffs.size() != channels) {
      throw ConfigError("coefficient rows must be 1 (broadcast) or one per channel");
    }
    for (const PenaltyBasis& b : bases) b.validate();
    for (std::size_t c = 0; c < channels; ++c) {
      if (coeffs_for(c).size() != basis_for(c).count()) {
        throw ConfigError("coefficient count must equal basis count N");
      }
    }
  }

  // Expand a broadcast coefficient row into per-channel rows (training wants
  // an independently learnable row per channel).
  void expand_coeffs(std::size_t channels) {
    if (coeffs.size() == 1 && channels > 1) {
      coeffs.resize(channels, coeffs[0]);
    }
  }
};

// Chosen offset and absolute source position for one output element.
struct ArgmaxEntry {
  int dx = 0;
  int dy = 0;
  std::size_t src = 0;  // flat index into the input map
};

struct ArgmaxRecord {
  std::size_t channels = 0, out_h = 0, out_w = 0;
  std::size_t in_h = 0, in_w = 0;
  std::vector<ArgmaxEntry> entries;  // channel-major, then row-major

  const ArgmaxEntry& at(std::size_t c, std::size_t oy, std::size_t ox) const {
    return entries[(c * out_h + oy) * out_w + ox];
  }
};

struct DefPoolResult {
  Tensor output;  // [C, floor(H/sy), floor(W/sx)]
  ArgmaxRecord record;
};

inline DefPoolResult defpool_forward(const Tensor& m, const DefPoolConfig& cfg) {
  if (m.rank() != 3) throw DimensionError("def-pool input must be [C,H,W]");
  const std::size_t channels = m.dim(0), h = m.dim(1), w = m.dim(2);
  cfg.validate(channels);

  const std::size_t out_h = h / static_cast<std::size_t>(cfg.sy);
  const std::size_t out_w = w / static_cast<std::size_t>(cfg.sx);
  if (out_h == 0 || out_w == 0) {
    throw ConfigError("subsampling step exceeds map size: no valid anchors");
  }

  DefPoolResult res{Tensor({channels, out_h, out_w}), {}};
  res.record.channels = channels;
  res.record.out_h = out_h;
  res.record.out_w = out_w;
  res.record.in_h = h;
  res.record.in_w = w;
  res.record.entries.resize(channels * out_h * out_w);

  std::size_t out_pos = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    const PenaltyBasis& basis = cfg.basis_for(c);
    const std::vector<double>& a = cfg.coeffs_for(c);
    const int r = basis.radius;
    const std::size_t n_bases = basis.count();
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const long ay = static_cast<long>(oy) * cfg.sy;
        const long ax = static_cast<long>(ox) * cfg.sx;
        bool found = false;
        double best = 0.0;
        ArgmaxEntry pick;
        for (int dy = -r; dy <= r; ++dy) {
          const long ry = ay + dy;
          if (ry < 0 || ry >= static_cast<long>(h)) continue;
          for (int dx = -r; dx <= r; ++dx) {
            const long rx = ax + dx;
            if (rx < 0 || rx >= static_cast<long>(w)) continue;
            double penalty = 0.0;
            bool excluded = false;
            for (std::size_t n = 0; n < n_bases; ++n) {
              const double d = basis.entry(n, dy, dx);
              if (std::isinf(d)) {  // excluded before arithmetic
                excluded = true;
                break;
              }
              penalty += a[n] * d;
            }
            if (excluded) continue;
            const std::size_t src =
                (c * h + static_cast<std::size_t>(ry)) * w + static_cast<std::size_t>(rx);
            const double v = m[src] - penalty;
            if (!found || v > best) {  // strict: first (smallest dy,dx) wins ties
              found = true;
              best = v;
              pick = ArgmaxEntry{dx, dy, src};
            }
          }
        }
        if (!found) {
          throw DegeneratePenaltyError("all offsets excluded at anchor (" +
                                       std::to_string(ay) + "," + std::to_string(ax) + ")");
        }
        res.output[out_pos] = best;
        res.record.entries[out_pos] = pick;
        ++out_pos;
      }
    }
  }
  return res;
}

struct DefPoolGrads {
  Tensor input;                              // same shape as the forward input
  std::vector<std::vector<double>> coeffs;   // layout matches cfg.coeffs
};

// Gradients per the max-pool style rule: the chosen offset receives the whole
// upstream gradient; d/da_n of one output element is -d_n at that offset.
inline DefPoolGrads defpool_backward(const Tensor& grad_out, const ArgmaxRecord& rec,
                                     const DefPoolConfig& cfg) {
  if (grad_out.rank() != 3 || grad_out.dim(0) != rec.channels || grad_out.dim(1) != rec.out_h ||
      grad_out.dim(2) != rec.out_w) {
    throw DimensionError("grad_out shape does not match the forward record");
  }
  cfg.validate(rec.channels);

  DefPoolGrads g;
  g.input = Tensor({rec.channels, rec.in_h, rec.in_w});
  g.coeffs.resize(cfg.coeffs.size());
  for (std::size_t i = 0; i < cfg.coeffs.size(); ++i) {
    g.coeffs[i].assign(cfg.coeffs[i].size(), 0.0);
  }

  std::size_t pos = 0;
  for (std::size_t c = 0; c < rec.channels; ++c) {
    const PenaltyBasis& basis = cfg.basis_for(c);
    const std::size_t row = cfg.coeffs.size() == 1 ? 0 : c;
    for (std::size_t oy = 0; oy < rec.out_h; ++oy) {
      for (std::size_t ox = 0; ox < rec.out_w; ++ox, ++pos) {
        const double go = grad_out[pos];
        const ArgmaxEntry& e = rec.entries[pos];
        g.input[e.src] += go;
        for (std::size_t n = 0; n < basis.count(); ++n) {
          g.coeffs[row][n] += go * (-basis.entry(n, e.dy, e.dx));
        }
      }
    }
  }
  return g;
}

// --- named constructors for the special cases -------------------------------

// Max-pooling as a def-pool: zero penalty for |dx|,|dy| <= k, +inf outside.
// The window is (2k+1) wide and centered on the anchor; the caller sets the
// strides. k = 0 degenerates to a plain subsample of the anchors.
inline DefPoolConfig make_maxpool_basis(int k) {
  if (k < 0) throw ParameterError("max-pool window radius must be >= 0");
  const int r = k;
  PenaltyBasis basis;
  basis.radius = r;
  basis.tables.push_back(penalty_table(r, 0.0));
  basis.learnable = false;

  DefPoolConfig cfg;
  cfg.shared_basis = true;
  cfg.bases.push_back(std::move(basis));
  cfg.coeffs = {{1.0}};
  return cfg;
}

// Single-output pooling over the whole map: strides equal the map size, the
// window covers every position (out-of-bounds offsets are excluded as usual).
// The default table is all-zero, i.e. an unpenalized global max.
inline DefPoolConfig make_global_basis(std::size_t h, std::size_t w) {
  if (h < 1 || w < 1) throw ParameterError("map size must be >= 1");
  const int r = static_cast<int>(h > w ? h : w);
  PenaltyBasis basis;
  basis.radius = r;
  basis.tables.push_back(penalty_table(r, 0.0));

  DefPoolConfig cfg;
  cfg.sx = static_cast<int>(w);
  cfg.sy = static_cast<int>(h);
  cfg.shared_basis = true;
  cfg.bases.push_back(std::move(basis));
  cfg.coeffs = {{1.0}};
  return cfg;
}

// A single predefined penalty map with the coefficient pinned at 1. The map
// must be odd and square; it may assign different costs to different
// directions and +inf to forbidden offsets.
inline PenaltyBasis make_directional_basis(const Tensor& penalty_map) {
  Tensor table = penalty_map;
  if (table.rank() == 2) {
    table = Tensor({1, penalty_map.dim(0), penalty_map.dim(1)}, penalty_map.data());
  }
  if (table.rank() != 3 || table.dim(0) != 1) {
    throw ParameterError("penalty map must be a single 2-D table");
  }
  const std::size_t n = table.dim(1);
  if (n != table.dim(2) || n % 2 == 0) {
    throw ParameterError("penalty map must be odd and square");
  }
  PenaltyBasis basis;
  basis.radius = static_cast<int>((n - 1) / 2);
  basis.tables.push_back(std::move(table));
  basis.learnable = false;
  basis.validate();
  return basis;
}

// Quadratic deformation as four basis tables over a whole map of size h x w:
// d1 = (i-b1)^2, d2 = (j-b2)^2, d3 = i-b1, d4 = j-b2, with i = row = dy and
// j = col = dx measured from the single anchor at (0,0). The constant
// a5 = a3^2/(4 a1) + a4^2/(4 a2) is a score offset, not a basis entry:
// pooled output = quadratic-penalized max + a5.
inline DefPoolConfig make_quadratic_basis(const QuadraticDeformation& q, std::size_t h,
                                          std::size_t w) {
  if (q.b1 < 0 || q.b1 >= static_cast<int>(h) || q.b2 < 0 || q.b2 >= static_cast<int>(w)) {
    throw ParameterError("quadratic anchor (b1,b2) must lie inside the map");
  }
  DefPoolConfig cfg = make_global_basis(h, w);
  PenaltyBasis& basis = cfg.bases[0];
  const int r = basis.radius;
  basis.tables.assign(4, penalty_table(r, 0.0));
  basis.learnable = true;
  for (int dy = -r; dy <= r; ++dy) {
    for (int dx = -r; dx <= r; ++dx) {
      const std::size_t iy = static_cast<std::size_t>(dy + r);
      const std::size_t ix = static_cast<std::size_t>(dx + r);
      const double di = dy - q.b1;
      const double dj = dx - q.b2;
      basis.tables[0].at(0, iy, ix) = di * di;
      basis.tables[1].at(0, iy, ix) = dj * dj;
      basis.tables[2].at(0, iy, ix) = di;
      basis.tables[3].at(0, iy, ix) = dj;
    }
  }
  cfg.coeffs = {{q.a1, q.a2, q.a3, q.a4}};
  return cfg;
}

// Top-left aligned k x k block pooling expressed as a penalty map: zero cost
// on offsets 0 <= dx,dy < k, +inf elsewhere. With strides sx = sy = k this is
// bit-identical to conventional non-overlapping max-pooling.
inline DefPoolConfig make_block_basis(int k) {
  if (k < 1) throw ParameterError("block size must be >= 1");
  Tensor map = penalty_table(k - 1, kInfPenalty);
  for (int dy = 0; dy < k; ++dy) {
    for (int dx = 0; dx < k; ++dx) {
      map.at(0, static_cast<std::size_t>(dy + k - 1), static_cast<std::size_t>(dx + k - 1)) = 0.0;
    }
  }
  DefPoolConfig cfg;
  cfg.sx = k;
  cfg.sy = k;
  cfg.shared_basis = true;
  cfg.bases.push_back(make_directional_basis(map));
  cfg.coeffs = {{1.0}};
  return cfg;
}

// --- JSON serialization ------------------------------------------------------
//
// {R, sx, sy, N, shared_basis, learnable, d_tables, coeffs}; +inf penalty
// entries are written as the string "inf" and restored exactly.

inline nlohmann::json defpool_config_to_json(const DefPoolConfig& cfg) {
  nlohmann::json j;
  j["R"] = cfg.bases.empty() ? 0 : cfg.bases[0].radius;
  j["sx"] = cfg.sx;
  j["sy"] = cfg.sy;
  j["N"] = cfg.bases.empty() ? 0 : cfg.bases[0].count();
  j["shared_basis"] = cfg.shared_basis;
  j["learnable"] = cfg.bases.empty() ? true : cfg.bases[0].learnable;
  nlohmann::json sets = nlohmann::json::array();
  for (const PenaltyBasis& basis : cfg.bases) {
    nlohmann::json tables = nlohmann::json::array();
    for (const Tensor& t : basis.tables) {
      nlohmann::json rows = nlohmann::json::array();
      for (std::size_t i = 0; i < t.dim(1); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t jx = 0; jx < t.dim(2); ++jx) {
          const double v = t.at(0, i, jx);
          if (std::isinf(v)) {
            row.push_back("inf");
          } else {
            row.push_back(v);
          }
        }
        rows.push_back(std::move(row));
      }
      tables.push_back(std::move(rows));
    }
    sets.push_back(std::move(tables));
  }
  j["d_tables"] = std::move(sets);
  j["coeffs"] = cfg.coeffs;
  return j;
}

inline DefPoolConfig defpool_config_from_json(const nlohmann::json& j) {
  DefPoolConfig cfg;
  cfg.sx = j.at("sx").get<int>();
  cfg.sy = j.at("sy").get<int>();
  cfg.shared_basis = j.at("shared_basis").get<bool>();
  const int radius = j.at("R").get<int>();
  const bool learnable = j.value("learnable", true);
  for (const nlohmann::json& tables : j.at("d_tables")) {
    PenaltyBasis basis;
    basis.radius = radius;
    basis.learnable = learnable;
    for (const nlohmann::json& rows : tables) {
      Tensor t = penalty_table(radius, 0.0);
      for (std::size_t i = 0; i < t.dim(1); ++i) {
        for (std::size_t jx = 0; jx < t.dim(2); ++jx) {
          const nlohmann::json& cell = rows.at(i).at(jx);
          t.at(0, i, jx) = cell.is_string() ? kInfPenalty : cell.get<double>();
        }
      }
      basis.tables.push_back(std::move(t));
    }
    basis.validate();
    cfg.bases.push_back(std::move(basis));
  }
  cfg.coeffs = j.at("coeffs").get<std::vector<std::vector<double>>>();
  return cfg;
}

}  // namespace defnet
