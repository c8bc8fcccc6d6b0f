#pragma once

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "defnet/errors.hpp"

namespace defnet {

// Dense row-major tensor of 64-bit reals. Dimension order for feature maps is
// [channel, height, width]; filter banks add a leading filter dimension.
// Evaluation paths treat tensors as immutable; training updates are
// single-writer by contract.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(checked_size(shape_), fill) {}

  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_size(shape_) != data_.size()) {
      throw DimensionError("tensor data length does not match shape");
    }
  }

  std::size_t rank() const { return shape_.size(); }
  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  double& operator[](std::size_t flat) { return data_[flat]; }
  double operator[](std::size_t flat) const { return data_[flat]; }

  // [C,H,W] accessors
  double& at(std::size_t c, std::size_t i, std::size_t j) {
    return data_[(c * shape_[1] + i) * shape_[2] + j];
  }
  double at(std::size_t c, std::size_t i, std::size_t j) const {
    return data_[(c * shape_[1] + i) * shape_[2] + j];
  }

  // [K,C,kh,kw] accessors
  double& at(std::size_t k, std::size_t c, std::size_t i, std::size_t j) {
    return data_[((k * shape_[1] + c) * shape_[2] + i) * shape_[3] + j];
  }
  double at(std::size_t k, std::size_t c, std::size_t i, std::size_t j) const {
    return data_[((k * shape_[1] + c) * shape_[2] + i) * shape_[3] + j];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  Tensor& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }

  // this += s * o
  void add_scaled(const Tensor& o, double s) {
    require_same_shape(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * o.data_[i];
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static std::size_t checked_size(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be >= 1");
      n *= d;
    }
    return shape.empty() ? 0 : n;
  }

  void require_same_shape(const Tensor& o) const {
    if (!same_shape(o)) throw DimensionError("tensor shape mismatch");
  }

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

inline Tensor operator+(Tensor a, const Tensor& b) {
  a += b;
  return a;
}

inline Tensor operator*(double s, Tensor t) {
  t *= s;
  return t;
}

// K filters over C input channels.
struct ConvFilterBank {
  Tensor filters;             // [K, C, kh, kw]
  std::vector<double> bias;   // length K

  ConvFilterBank() = default;
  ConvFilterBank(Tensor f, std::vector<double> b) : filters(std::move(f)), bias(std::move(b)) {
    if (filters.rank() != 4) throw DimensionError("filter bank must have shape [K,C,kh,kw]");
    if (bias.size() != filters.dim(0)) throw DimensionError("bias length must equal filter count");
  }
};

// Valid (no padding) 2-D convolution: out[k,i,j] = bias[k] + sum input[c,i+u,j+v] * w[k,c,u,v].
inline Tensor conv2d(const Tensor& input, const ConvFilterBank& bank) {
  if (input.rank() != 3) throw DimensionError("conv2d input must be [C,H,W]");
  const std::size_t c_in = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t k = bank.filters.dim(0), c_f = bank.filters.dim(1);
  const std::size_t kh = bank.filters.dim(2), kw = bank.filters.dim(3);
  if (c_in != c_f) throw DimensionError("conv2d channel count mismatch");
  if (kh > h || kw > w) throw DimensionError("conv2d kernel larger than input");

  Tensor out({k, h - kh + 1, w - kw + 1});
  for (std::size_t f = 0; f < k; ++f) {
    for (std::size_t i = 0; i + kh <= h; ++i) {
      for (std::size_t j = 0; j + kw <= w; ++j) {
        double acc = bank.bias[f];
        for (std::size_t c = 0; c < c_in; ++c) {
          for (std::size_t u = 0; u < kh; ++u) {
            for (std::size_t v = 0; v < kw; ++v) {
              acc += input.at(c, i + u, j + v) * bank.filters.at(f, c, u, v);
            }
          }
        }
        out.at(f, i, j) = acc;
      }
    }
  }
  return out;
}

struct MaxPoolResult {
  Tensor output;
  // flat index into the input for every output element, in output order;
  // used to route gradients back through the pool
  std::vector<std::size_t> argmax;
};

inline MaxPoolResult max_pool(const Tensor& input, std::size_t k, std::size_t stride) {
  if (input.rank() != 3) throw DimensionError("max_pool input must be [C,H,W]");
  if (k < 1 || stride < 1) throw ParameterError("max_pool kernel and stride must be >= 1");
  const std::size_t c_n = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (k > h || k > w) throw ParameterError("max_pool kernel larger than input");

  const std::size_t oh = (h - k) / stride + 1;
  const std::size_t ow = (w - k) / stride + 1;
  MaxPoolResult res{Tensor({c_n, oh, ow}), {}};
  res.argmax.resize(c_n * oh * ow);

  std::size_t out_pos = 0;
  for (std::size_t c = 0; c < c_n; ++c) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t y0 = oy * stride, x0 = ox * stride;
        std::size_t best_idx = (c * h + y0) * w + x0;
        double best = input[best_idx];
        for (std::size_t u = 0; u < k; ++u) {
          for (std::size_t v = 0; v < k; ++v) {
            const std::size_t idx = (c * h + y0 + u) * w + x0 + v;
            if (input[idx] > best) {
              best = input[idx];
              best_idx = idx;
            }
          }
        }
        res.output.at(c, oy, ox) = best;
        res.argmax[out_pos++] = best_idx;
      }
    }
  }
  return res;
}

// --- serialization ---------------------------------------------------------
//
// Byte format (little-endian, no trailing bytes):
//   8-byte magic "DPTENSR1" | u32 rank | rank * u32 dims | dims-product * f64

namespace detail {

constexpr char kTensorMagic[8] = {'D', 'P', 'T', 'E', 'N', 'S', 'R', '1'};

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
               static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}

inline void put_f64(std::ostream& os, double d) {
  const std::uint64_t v = std::bit_cast<std::uint64_t>(d);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

inline bool get_u32(std::istream& is, std::uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
      (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  return true;
}

inline bool get_f64(std::istream& is, double& d) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) return false;
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  d = std::bit_cast<double>(v);
  return true;
}

}  // namespace detail

inline void save_tensor(const Tensor& t, const std::filesystem::path& path) {
  if (t.rank() == 0) throw ParameterError("cannot save an empty tensor");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open file for writing: " + path.string());
  os.write(detail::kTensorMagic, 8);
  detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t i = 0; i < t.rank(); ++i) {
    detail::put_u32(os, static_cast<std::uint32_t>(t.dim(i)));
  }
  for (double v : t.data()) detail::put_f64(os, v);
  if (!os) throw FormatError("write failed: " + path.string());
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open tensor file: " + path.string());

  char magic[8];
  if (!is.read(magic, 8) || !std::equal(magic, magic + 8, detail::kTensorMagic)) {
    throw FormatError("bad tensor magic: " + path.string());
  }
  std::uint32_t rank = 0;
  if (!detail::get_u32(is, rank) || rank < 1 || rank > 16) {
    throw FormatError("bad tensor rank: " + path.string());
  }
  std::vector<std::size_t> shape(rank);
  std::size_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    std::uint32_t d = 0;
    if (!detail::get_u32(is, d) || d == 0) throw FormatError("bad tensor dims: " + path.string());
    shape[i] = d;
    count *= d;
  }
  std::vector<double> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    if (!detail::get_f64(is, data[i])) {
      throw FormatError("truncated tensor payload: " + path.string());
    }
  }
  if (is.peek() != std::ifstream::traits_type::eof()) {
    throw FormatError("trailing bytes after tensor payload: " + path.string());
  }
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace defnet
