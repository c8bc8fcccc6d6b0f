#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "defnet/defpool.hpp"
#include "defnet/errors.hpp"
#include "defnet/layers.hpp"
#include "defnet/rng.hpp"
#include "defnet/tensor.hpp"

namespace defnet {

// Pooling used inside the part-filter branches.
//   directional  - def-pooling with a fixed per-direction penalty map
//   zero_window  - def-pooling with an all-zero penalty (the max-pool special
//                  case over the same window); the "max-pool network" ablation
//   max_pool     - a plain 2x2/stride-2 max-pool layer
//   block        - def-pooling emulating that same 2x2 block pool bit-exactly
//   axes         - def-pooling with predefined |dy| and |dx| cost tables and
//                  learnable per-filter coefficients
enum class BranchPool { kDirectional, kZeroWindow, kMaxPool, kBlock, kAxes };

inline std::string branch_pool_name(BranchPool p) {
  switch (p) {
    case BranchPool::kDirectional: return "directional";
    case BranchPool::kZeroWindow: return "zero_window";
    case BranchPool::kMaxPool: return "max_pool";
    case BranchPool::kBlock: return "block";
    case BranchPool::kAxes: return "axes";
  }
  throw ParameterError("unknown branch pool");
}

inline BranchPool branch_pool_from_name(const std::string& s) {
  if (s == "directional") return BranchPool::kDirectional;
  if (s == "zero_window") return BranchPool::kZeroWindow;
  if (s == "max_pool") return BranchPool::kMaxPool;
  if (s == "block") return BranchPool::kBlock;
  if (s == "axes") return BranchPool::kAxes;
  throw ParameterError("unknown branch pool name: " + s);
}

struct NetConfig {
  std::size_t input_channels = 1;
  std::size_t input_size = 20;     // crops are warped to this square size
  std::size_t classes = 4;
  std::size_t trunk_filters1 = 8;
  std::size_t trunk_filters2 = 16;
  std::size_t trunk_pool = 2;      // kernel = stride of the trunk max-pool

  struct Branch {
    std::size_t filter_size;
    std::size_t filters;
  };
  std::vector<Branch> branches{{3, 8}, {5, 8}, {7, 8}};

  BranchPool branch_pool = BranchPool::kDirectional;
  int pool_radius = 2;             // window radius of the branch def-pool
  int pool_stride = 2;             // subsampling step of the branch def-pool
  double penalty_unit = 0.25;      // scale of the directional penalty maps
  std::uint64_t seed = 1;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["input_channels"] = input_channels;
    j["input_size"] = input_size;
    j["classes"] = classes;
    j["trunk_filters1"] = trunk_filters1;
    j["trunk_filters2"] = trunk_filters2;
    j["trunk_pool"] = trunk_pool;
    nlohmann::json bs = nlohmann::json::array();
    for (const Branch& b : branches) bs.push_back({{"filter_size", b.filter_size}, {"filters", b.filters}});
    j["branches"] = std::move(bs);
    j["branch_pool"] = branch_pool_name(branch_pool);
    j["pool_radius"] = pool_radius;
    j["pool_stride"] = pool_stride;
    j["penalty_unit"] = penalty_unit;
    j["seed"] = seed;
    return j;
  }

  static NetConfig from_json(const nlohmann::json& j) {
    NetConfig c;
    c.input_channels = j.at("input_channels").get<std::size_t>();
    c.input_size = j.at("input_size").get<std::size_t>();
    c.classes = j.at("classes").get<std::size_t>();
    c.trunk_filters1 = j.at("trunk_filters1").get<std::size_t>();
    c.trunk_filters2 = j.at("trunk_filters2").get<std::size_t>();
    c.trunk_pool = j.at("trunk_pool").get<std::size_t>();
    c.branches.clear();
    for (const nlohmann::json& b : j.at("branches")) {
      c.branches.push_back({b.at("filter_size").get<std::size_t>(), b.at("filters").get<std::size_t>()});
    }
    c.branch_pool = branch_pool_from_name(j.at("branch_pool").get<std::string>());
    c.pool_radius = j.at("pool_radius").get<int>();
    c.pool_stride = j.value("pool_stride", 1);
    c.penalty_unit = j.at("penalty_unit").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
  }
};

// Directional penalty map for branch index b: branch 0 tolerates horizontal
// displacement, branch 1 vertical, further branches pay an isotropic cost.
// Cost at the anchor is always zero.
inline Tensor directional_penalty_map(int radius, std::size_t branch_index, double unit) {
  Tensor d = penalty_table(radius, 0.0);
  double wy = unit, wx = unit;
  if (branch_index == 0) {
    wy = 3.0 * unit;
    wx = 0.5 * unit;
  } else if (branch_index == 1) {
    wy = 0.5 * unit;
    wx = 3.0 * unit;
  }
  for (int dy = -radius; dy <= radius; ++dy) {
    for (int dx = -radius; dx <= radius; ++dx) {
      d.at(0, dy + radius, dx + radius) = wy * std::abs(dy) + wx * std::abs(dx);
    }
  }
  return d;
}

// Trunk, part-filter branches with pooling, and one linear map from the
// concatenated branch outputs to per-class scores.
class Network {
 public:
  explicit Network(const NetConfig& cfg) : cfg_(cfg) {
    Rng rng(cfg.seed);
    build(rng);
  }

  const NetConfig& config() const { return cfg_; }

  std::vector<double> forward(const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != cfg_.input_channels ||
        image.dim(1) != cfg_.input_size || image.dim(2) != cfg_.input_size) {
      throw DimensionError("network input shape mismatch");
    }
    const Tensor trunk_out = trunk_.forward(image);
    Tensor features({feature_len_});
    std::size_t off = 0;
    for (std::size_t b = 0; b < branches_.size(); ++b) {
      const Tensor out = branches_[b].forward(trunk_out);
      for (std::size_t i = 0; i < out.size(); ++i) features[off + i] = out[i];
      off += out.size();
    }
    const Tensor scores = head_->forward(features);
    return scores.data();
  }

  // Backward pass for the most recent forward. Gradients accumulate until
  // zero_grads() is called.
  void backward(const std::vector<double>& grad_scores) {
    const Tensor grad_feat = head_->backward(Tensor({grad_scores.size()}, grad_scores));
    Tensor grad_trunk;
    std::size_t off = 0;
    for (std::size_t b = 0; b < branches_.size(); ++b) {
      std::vector<double> slice(grad_feat.data().begin() + off,
                                grad_feat.data().begin() + off + branch_sizes_[b]);
      Tensor gb = branches_[b].backward(Tensor(branch_shapes_[b], std::move(slice)));
      if (b == 0) {
        grad_trunk = std::move(gb);
      } else {
        grad_trunk += gb;
      }
      off += branch_sizes_[b];
    }
    trunk_.backward(grad_trunk);
  }

  Tensor trunk_features(const Tensor& image) { return trunk_.forward(image); }

  std::vector<ParamRef> params() {
    std::vector<ParamRef> out;
    trunk_.collect_params("trunk", out);
    for (std::size_t b = 0; b < branches_.size(); ++b) {
      branches_[b].collect_params("branch" + std::to_string(b), out);
    }
    head_->collect_params("head", out);
    return out;
  }

  void zero_grads() {
    trunk_.zero_grads();
    for (auto& b : branches_) b.zero_grads();
    head_->zero_grads();
  }

  std::size_t feature_length() const { return feature_len_; }
  std::size_t classes() const { return head_->outputs(); }

  // Fresh head for a new class count; called between pretraining and
  // fine-tuning when the label spaces differ.
  void reinit_head(std::size_t classes, std::uint64_t seed) {
    Rng rng(seed);
    head_ = std::make_unique<LinearLayer>(classes, feature_len_, rng);
  }

  // Independent replica with identical parameters (layer caches excluded);
  // used for read-only scoring from several threads.
  Network clone() {
    Network copy(cfg_);
    if (copy.classes() != classes()) copy.reinit_head(classes(), 0);
    std::vector<ParamRef> src = params();
    std::vector<ParamRef> dst = copy.params();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i].value = *src[i].value;
    return copy;
  }

  void save(const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["format"] = "defnet-model-v1";
    manifest["config"] = cfg_.to_json();
    nlohmann::json names = nlohmann::json::array();
    for (const ParamRef& p : params()) {
      names.push_back(p.name);
      save_tensor(Tensor({p.value->size()}, *p.value), dir / (p.name + ".dpt"));
    }
    manifest["params"] = std::move(names);
    manifest["classes"] = head_->outputs();
    std::ofstream os(dir / "manifest.json");
    os << manifest.dump(2) << "\n";
  }

  static Network load(const std::filesystem::path& dir) {
    std::ifstream is(dir / "manifest.json");
    if (!is) throw FormatError("missing model manifest: " + (dir / "manifest.json").string());
    nlohmann::json manifest = nlohmann::json::parse(is);
    Network net(NetConfig::from_json(manifest.at("config")));
    const std::size_t classes = manifest.at("classes").get<std::size_t>();
    if (classes != net.classes()) net.reinit_head(classes, 0);
    for (ParamRef& p : net.params()) {
      const Tensor t = load_tensor(dir / (p.name + ".dpt"));
      if (t.size() != p.value->size()) {
        throw FormatError("parameter size mismatch for " + p.name);
      }
      *p.value = t.data();
    }
    return net;
  }

 private:
  void build(Rng& rng) {
    trunk_.append(std::make_unique<ConvLayer>(cfg_.trunk_filters1, cfg_.input_channels, 3, rng));
    trunk_.append(std::make_unique<ReluLayer>());
    trunk_.append(std::make_unique<MaxPoolLayer>(cfg_.trunk_pool, cfg_.trunk_pool));
    trunk_.append(std::make_unique<ConvLayer>(cfg_.trunk_filters2, cfg_.trunk_filters1, 3, rng));
    trunk_.append(std::make_unique<ReluLayer>());
    const std::vector<std::size_t> trunk_shape =
        trunk_.verify({cfg_.input_channels, cfg_.input_size, cfg_.input_size});

    feature_len_ = 0;
    for (std::size_t b = 0; b < cfg_.branches.size(); ++b) {
      const NetConfig::Branch& spec = cfg_.branches[b];
      // branch map after the part-filter convolution
      const int map_side = static_cast<int>(trunk_shape[1]) - static_cast<int>(spec.filter_size) + 1;
      if (map_side < 1) throw DimensionError("part filter larger than trunk output");
      const int stride = std::min(cfg_.pool_stride, map_side);
      LayerStack stack;
      stack.append(std::make_unique<ConvLayer>(spec.filters, cfg_.trunk_filters2,
                                               spec.filter_size, rng));
      stack.append(std::make_unique<ReluLayer>());
      switch (cfg_.branch_pool) {
        case BranchPool::kDirectional: {
          DefPoolConfig pool;
          pool.sx = pool.sy = stride;
          pool.bases.push_back(
              make_directional_basis(directional_penalty_map(cfg_.pool_radius, b, cfg_.penalty_unit)));
          pool.coeffs = {{1.0}};
          stack.append(std::make_unique<DefPoolLayer>(std::move(pool), spec.filters));
          break;
        }
        case BranchPool::kZeroWindow: {
          DefPoolConfig pool = make_maxpool_basis(cfg_.pool_radius);
          pool.sx = pool.sy = stride;
          stack.append(std::make_unique<DefPoolLayer>(std::move(pool), spec.filters));
          break;
        }
        case BranchPool::kMaxPool:
          stack.append(std::make_unique<MaxPoolLayer>(2, 2));
          break;
        case BranchPool::kBlock:
          stack.append(std::make_unique<DefPoolLayer>(make_block_basis(2), spec.filters));
          break;
        case BranchPool::kAxes: {
          DefPoolConfig pool;
          pool.sx = pool.sy = stride;
          PenaltyBasis basis;
          basis.radius = cfg_.pool_radius;
          basis.tables.push_back(penalty_table(cfg_.pool_radius, 0.0));
          basis.tables.push_back(penalty_table(cfg_.pool_radius, 0.0));
          for (int dy = -cfg_.pool_radius; dy <= cfg_.pool_radius; ++dy) {
            for (int dx = -cfg_.pool_radius; dx <= cfg_.pool_radius; ++dx) {
              basis.tables[0].at(0, dy + cfg_.pool_radius, dx + cfg_.pool_radius) = std::abs(dy);
              basis.tables[1].at(0, dy + cfg_.pool_radius, dx + cfg_.pool_radius) = std::abs(dx);
            }
          }
          pool.bases.push_back(std::move(basis));
          pool.coeffs = {{cfg_.penalty_unit, cfg_.penalty_unit}};
          stack.append(std::make_unique<DefPoolLayer>(std::move(pool), spec.filters));
          break;
        }
      }
      stack.append(std::make_unique<FlattenLayer>());
      const std::vector<std::size_t> out_shape = stack.verify(trunk_shape);
      branch_shapes_.push_back(out_shape);
      branch_sizes_.push_back(out_shape[0]);
      feature_len_ += out_shape[0];
      branches_.push_back(std::move(stack));
    }

    head_ = std::make_unique<LinearLayer>(cfg_.classes, feature_len_, rng);
  }

  NetConfig cfg_;
  LayerStack trunk_;
  std::vector<LayerStack> branches_;
  std::unique_ptr<LinearLayer> head_;
  std::size_t feature_len_ = 0;
  std::vector<std::vector<std::size_t>> branch_shapes_;
  std::vector<std::size_t> branch_sizes_;
};

// --- hinge loss ---------------------------------------------------------------

// Sum of per-class binary hinges: loss = sum_k max(0, 1 - y_k s_k);
// d loss / d s_k = -y_k when the margin is violated, else 0.
inline std::pair<double, std::vector<double>> hinge_loss(const std::vector<double>& scores,
                                                         const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw DimensionError("scores/labels length mismatch");
  double loss = 0.0;
  std::vector<double> grad(scores.size(), 0.0);
  for (std::size_t k = 0; k < scores.size(); ++k) {
    if (labels[k] != 1 && labels[k] != -1) {
      throw ParameterError("hinge labels must be -1 or +1");
    }
    const double margin = 1.0 - labels[k] * scores[k];
    if (margin > 0.0) {
      loss += margin;
      grad[k] = -static_cast<double>(labels[k]);
    }
  }
  return {loss, std::move(grad)};
}

// --- SGD ------------------------------------------------------------------------

struct LabeledImage {
  Tensor image;
  std::vector<int> labels;  // one +-1 entry per class
};

struct TrainConfig {
  double learning_rate = 0.01;
  double drop_factor = 10.0;      // rate divides by this once
  std::size_t drop_step = 0;      // 0 = derive as 2/3 of the iteration count
  std::size_t batch_size = 16;
  std::size_t iterations = 300;
  double weight_decay = 1e-4;
  std::uint64_t seed = 1;

  std::size_t effective_drop_step() const {
    return drop_step > 0 ? drop_step : (iterations * 2) / 3;
  }

  void validate() const {
    if (learning_rate < 0.0 || drop_factor <= 0.0) throw ParameterError("bad learning rate schedule");
    if (batch_size < 1 || iterations < 1) throw ParameterError("batch size and iterations must be >= 1");
  }
};

inline void apply_sgd_update(std::vector<ParamRef>& params, double rate, double weight_decay,
                             double grad_scale) {
  for (ParamRef& p : params) {
    for (std::size_t i = 0; i < p.value->size(); ++i) {
      (*p.value)[i] -= rate * ((*p.grad)[i] * grad_scale + weight_decay * (*p.value)[i]);
    }
  }
}

// One optimizer step on a batch; returns the mean hinge loss.
inline double sgd_step(Network& net, const std::vector<const LabeledImage*>& batch,
                       const TrainConfig& cfg, std::size_t iteration) {
  cfg.validate();
  if (batch.empty()) throw ParameterError("sgd_step needs a nonempty batch");
  net.zero_grads();
  double total = 0.0;
  for (const LabeledImage* sample : batch) {
    const std::vector<double> scores = net.forward(sample->image);
    for (double s : scores) {
      if (!std::isfinite(s)) throw DivergenceError("non-finite network score");
    }
    auto [loss, grad] = hinge_loss(scores, sample->labels);
    total += loss;
    net.backward(grad);
  }
  const double mean_loss = total / static_cast<double>(batch.size());
  if (!std::isfinite(mean_loss)) throw DivergenceError("non-finite training loss");
  const double rate = iteration >= cfg.effective_drop_step()
                          ? cfg.learning_rate / cfg.drop_factor
                          : cfg.learning_rate;
  std::vector<ParamRef> params = net.params();
  apply_sgd_update(params, rate, cfg.weight_decay, 1.0 / static_cast<double>(batch.size()));
  return mean_loss;
}

// Full training loop with batches drawn by the config seed; returns the
// per-iteration loss history.
inline std::vector<double> train(Network& net, const std::vector<LabeledImage>& samples,
                                 const TrainConfig& cfg) {
  cfg.validate();
  if (samples.empty()) throw ParameterError("training set is empty");
  Rng rng(cfg.seed);
  std::vector<double> history;
  history.reserve(cfg.iterations);
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    std::vector<const LabeledImage*> batch;
    batch.reserve(cfg.batch_size);
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      batch.push_back(&samples[rng.uniform_int(samples.size())]);
    }
    history.push_back(sgd_step(net, batch, cfg, it));
  }
  return history;
}

}  // namespace defnet
