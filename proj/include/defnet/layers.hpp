#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "defnet/defpool.hpp"
#include "defnet/errors.hpp"
#include "defnet/rng.hpp"
#include "defnet/tensor.hpp"

namespace defnet {

// Handle to one named parameter group and its gradient accumulator.
struct ParamRef {
  std::string name;
  std::vector<double>* value;
  std::vector<double>* grad;
};

// A layer owns its parameters and caches whatever its backward rule needs.
// forward/backward always run in matched pairs on a single thread.
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x) = 0;
  virtual Tensor backward(const Tensor& grad_out) = 0;
  virtual void collect_params(const std::string& prefix, std::vector<ParamRef>& out) {}
  virtual void zero_grads() {}
  virtual std::string kind() const = 0;
};

class ConvLayer : public Layer {
 public:
  ConvLayer(std::size_t filters, std::size_t in_channels, std::size_t kernel, Rng& rng)
      : bank_(Tensor({filters, in_channels, kernel, kernel}), std::vector<double>(filters, 0.0)),
        grad_w_(bank_.filters.shape()),
        grad_b_(filters, 0.0) {
    const double limit = 1.0 / std::sqrt(static_cast<double>(in_channels * kernel * kernel));
    for (double& v : bank_.filters.data()) v = rng.uniform(-limit, limit);
  }

  Tensor forward(const Tensor& x) override {
    input_ = x;
    return conv2d(x, bank_);
  }

  Tensor backward(const Tensor& grad_out) override {
    const std::size_t c_in = input_.dim(0), h = input_.dim(1), w = input_.dim(2);
    const std::size_t k = bank_.filters.dim(0);
    const std::size_t kh = bank_.filters.dim(2), kw = bank_.filters.dim(3);
    const std::size_t oh = grad_out.dim(1), ow = grad_out.dim(2);

    Tensor grad_in({c_in, h, w});
    for (std::size_t f = 0; f < k; ++f) {
      for (std::size_t i = 0; i < oh; ++i) {
        for (std::size_t j = 0; j < ow; ++j) {
          const double go = grad_out.at(f, i, j);
          if (go == 0.0) continue;
          grad_b_[f] += go;
          for (std::size_t c = 0; c < c_in; ++c) {
            for (std::size_t u = 0; u < kh; ++u) {
              for (std::size_t v = 0; v < kw; ++v) {
                grad_w_.at(f, c, u, v) += go * input_.at(c, i + u, j + v);
                grad_in.at(c, i + u, j + v) += go * bank_.filters.at(f, c, u, v);
              }
            }
          }
        }
      }
    }
    return grad_in;
  }

  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override {
    out.push_back({prefix + ".weights", &bank_.filters.data(), &grad_w_.data()});
    out.push_back({prefix + ".bias", &bank_.bias, &grad_b_});
  }

  void zero_grads() override {
    grad_w_.fill(0.0);
    std::fill(grad_b_.begin(), grad_b_.end(), 0.0);
  }

  std::string kind() const override { return "conv"; }

  const ConvFilterBank& bank() const { return bank_; }

 private:
  ConvFilterBank bank_;
  Tensor grad_w_;
  std::vector<double> grad_b_;
  Tensor input_;
};

// Elementwise max(0, x).
class ReluLayer : public Layer {
 public:
  Tensor forward(const Tensor& x) override {
    input_ = x;
    Tensor y = x;
    for (double& v : y.data()) v = v > 0.0 ? v : 0.0;
    return y;
  }

  Tensor backward(const Tensor& grad_out) override {
    Tensor g = grad_out;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (input_[i] <= 0.0) g[i] = 0.0;
    }
    return g;
  }

  std::string kind() const override { return "relu"; }

 private:
  Tensor input_;
};

class MaxPoolLayer : public Layer {
 public:
  MaxPoolLayer(std::size_t k, std::size_t stride) : k_(k), stride_(stride) {}

  Tensor forward(const Tensor& x) override {
    in_shape_ = x.shape();
    MaxPoolResult res = max_pool(x, k_, stride_);
    argmax_ = std::move(res.argmax);
    return res.output;
  }

  Tensor backward(const Tensor& grad_out) override {
    Tensor grad_in(in_shape_);
    for (std::size_t i = 0; i < grad_out.size(); ++i) {
      grad_in[argmax_[i]] += grad_out[i];
    }
    return grad_in;
  }

  std::string kind() const override { return "maxpool"; }

 private:
  std::size_t k_, stride_;
  std::vector<std::size_t> in_shape_;
  std::vector<std::size_t> argmax_;
};

class DefPoolLayer : public Layer {
 public:
  // channels must match the incoming map; learnable bases get one coefficient
  // row per channel so each filter owns its deformation weights
  DefPoolLayer(DefPoolConfig cfg, std::size_t channels) : cfg_(std::move(cfg)) {
    if (cfg_.bases[0].learnable) cfg_.expand_coeffs(channels);
    cfg_.validate(channels);
    grad_coeffs_.resize(cfg_.coeffs.size());
    for (std::size_t i = 0; i < cfg_.coeffs.size(); ++i) {
      grad_coeffs_[i].assign(cfg_.coeffs[i].size(), 0.0);
    }
  }

  Tensor forward(const Tensor& x) override {
    DefPoolResult res = defpool_forward(x, cfg_);
    record_ = std::move(res.record);
    return res.output;
  }

  Tensor backward(const Tensor& grad_out) override {
    DefPoolGrads g = defpool_backward(grad_out, record_, cfg_);
    if (cfg_.bases[0].learnable) {
      for (std::size_t r = 0; r < grad_coeffs_.size(); ++r) {
        for (std::size_t n = 0; n < grad_coeffs_[r].size(); ++n) {
          grad_coeffs_[r][n] += g.coeffs[r][n];
        }
      }
    }
    return std::move(g.input);
  }

  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override {
    if (!cfg_.bases[0].learnable) return;
    for (std::size_t r = 0; r < cfg_.coeffs.size(); ++r) {
      out.push_back({prefix + ".coeffs" + std::to_string(r), &cfg_.coeffs[r], &grad_coeffs_[r]});
    }
  }

  void zero_grads() override {
    for (auto& row : grad_coeffs_) std::fill(row.begin(), row.end(), 0.0);
  }

  std::string kind() const override { return "defpool"; }

  const DefPoolConfig& config() const { return cfg_; }

 private:
  DefPoolConfig cfg_;
  ArgmaxRecord record_;
  std::vector<std::vector<double>> grad_coeffs_;
};

class FlattenLayer : public Layer {
 public:
  Tensor forward(const Tensor& x) override {
    in_shape_ = x.shape();
    return Tensor({x.size()}, x.data());
  }

  Tensor backward(const Tensor& grad_out) override {
    return Tensor(in_shape_, grad_out.data());
  }

  std::string kind() const override { return "flatten"; }

 private:
  std::vector<std::size_t> in_shape_;
};

// Fully connected map from a rank-1 feature vector to per-class scores.
class LinearLayer : public Layer {
 public:
  LinearLayer(std::size_t outputs, std::size_t inputs, Rng& rng)
      : weights_({outputs, inputs}), bias_(outputs, 0.0),
        grad_w_({outputs, inputs}), grad_b_(outputs, 0.0) {
    const double limit = 1.0 / std::sqrt(static_cast<double>(inputs));
    for (double& v : weights_.data()) v = rng.uniform(-limit, limit);
  }

  Tensor forward(const Tensor& x) override {
    if (x.rank() != 1 || x.dim(0) != weights_.dim(1)) {
      throw DimensionError("linear layer input length mismatch");
    }
    input_ = x;
    const std::size_t k = weights_.dim(0), d = weights_.dim(1);
    Tensor y({k});
    for (std::size_t o = 0; o < k; ++o) {
      double acc = bias_[o];
      const double* w = &weights_.data()[o * d];
      for (std::size_t i = 0; i < d; ++i) acc += w[i] * x[i];
      y[o] = acc;
    }
    return y;
  }

  Tensor backward(const Tensor& grad_out) override {
    const std::size_t k = weights_.dim(0), d = weights_.dim(1);
    Tensor grad_in({d});
    for (std::size_t o = 0; o < k; ++o) {
      const double go = grad_out[o];
      grad_b_[o] += go;
      if (go == 0.0) continue;
      double* gw = &grad_w_.data()[o * d];
      const double* w = &weights_.data()[o * d];
      for (std::size_t i = 0; i < d; ++i) {
        gw[i] += go * input_[i];
        grad_in[i] += go * w[i];
      }
    }
    return grad_in;
  }

  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override {
    out.push_back({prefix + ".weights", &weights_.data(), &grad_w_.data()});
    out.push_back({prefix + ".bias", &bias_, &grad_b_});
  }

  void zero_grads() override {
    grad_w_.fill(0.0);
    std::fill(grad_b_.begin(), grad_b_.end(), 0.0);
  }

  std::string kind() const override { return "linear"; }

  std::size_t outputs() const { return weights_.dim(0); }
  std::size_t inputs() const { return weights_.dim(1); }

 private:
  Tensor weights_;  // [K, D]
  std::vector<double> bias_;
  Tensor grad_w_;
  std::vector<double> grad_b_;
  Tensor input_;
};

// Ordered sequence of layers; shape compatibility is established by running a
// zero probe through the stack once it is assembled.
class LayerStack {
 public:
  LayerStack() = default;

  void append(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }

  Tensor forward(const Tensor& x) {
    Tensor cur = x;
    for (auto& layer : layers_) cur = layer->forward(cur);
    return cur;
  }

  Tensor backward(const Tensor& grad_out) {
    Tensor cur = grad_out;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
      cur = (*it)->backward(cur);
    }
    return cur;
  }

  // Throws if adjacent layer shapes do not compose; returns the output shape.
  std::vector<std::size_t> verify(const std::vector<std::size_t>& in_shape) {
    Tensor probe(in_shape, 0.0);
    return forward(probe).shape();
  }

  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      layers_[i]->collect_params(prefix + "." + std::to_string(i) + "." + layers_[i]->kind(), out);
    }
  }

  void zero_grads() {
    for (auto& layer : layers_) layer->zero_grads();
  }

  std::size_t size() const { return layers_.size(); }
  Layer& at(std::size_t i) { return *layers_[i]; }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

}  // namespace defnet
