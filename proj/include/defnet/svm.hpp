#pragma once

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <vector>

#include "defnet/errors.hpp"
#include "defnet/rng.hpp"

namespace defnet {

struct SvmConfig {
  double learning_rate = 0.05;
  std::size_t epochs = 30;
  double lambda = 1e-3;  // L2 regularization
  std::uint64_t seed = 1;
};

// Binary linear SVM trained by hinge subgradient descent. Training resumes
// from the current weights when they already have the right length, which
// lets callers start from a hand-picked initialization.
class LinearSvm {
 public:
  void fit(const std::vector<std::vector<double>>& xs, const std::vector<int>& ys,
           const SvmConfig& cfg) {
    if (xs.empty() || xs.size() != ys.size()) throw ParameterError("bad SVM training set");
    const std::size_t dim = xs[0].size();
    if (w_.size() != dim) {
      w_.assign(dim, 0.0);
      b_ = 0.0;
    }
    Rng rng(cfg.seed);
    std::vector<std::size_t> order(xs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      rng.shuffle(order);
      for (std::size_t idx : order) {
        const std::vector<double>& x = xs[idx];
        const double y = ys[idx];
        const double margin = y * score(x);
        for (std::size_t i = 0; i < dim; ++i) {
          double g = cfg.lambda * w_[i];
          if (margin < 1.0) g -= y * x[i];
          w_[i] -= cfg.learning_rate * g;
        }
        if (margin < 1.0) b_ += cfg.learning_rate * y;
      }
    }
  }

  double score(const std::vector<double>& x) const {
    double s = b_;
    for (std::size_t i = 0; i < w_.size(); ++i) s += w_[i] * x[i];
    return s;
  }

  std::vector<double>& weights() { return w_; }
  const std::vector<double>& weights() const { return w_; }
  double& bias() { return b_; }
  double bias() const { return b_; }

 private:
  std::vector<double> w_;
  double b_ = 0.0;
};

}  // namespace defnet
