#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace deepcarve {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

inline std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

/// Dense row-major tensor of doubles.
///
/// A default-constructed tensor is empty (rank 0, no data) and only serves as
/// a placeholder, e.g. for layers without parameters. Every tensor built from a
/// shape must have rank >= 1 and all dimensions >= 1.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double value = 0.0) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(shape_size(shape_), value);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (shape_size(shape_) != data_.size())
      throw std::invalid_argument("tensor shape " + shape_string(shape_) + " holds " +
                                  std::to_string(shape_size(shape_)) + " values, got " +
                                  std::to_string(data_.size()));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor fill(Shape shape, double value) { return Tensor(std::move(shape), value); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  /// Row `i` of the leading axis, as a flat view.
  std::span<double> slice(std::size_t i) {
    const std::size_t stride = data_.size() / shape_[0];
    return std::span<double>(data_).subspan(i * stride, stride);
  }
  std::span<const double> slice(std::size_t i) const {
    const std::size_t stride = data_.size() / shape_[0];
    return std::span<const double>(data_).subspan(i * stride, stride);
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size())
      throw std::invalid_argument("cannot reshape " + shape_string(shape_) + " to " +
                                  shape_string(shape));
    return Tensor(std::move(shape), data_);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw std::invalid_argument("tensor shape must have rank >= 1");
    for (auto d : shape)
      if (d == 0) throw std::invalid_argument("tensor shape " + shape_string(shape) + " has a zero dimension");
  }

  Shape shape_;
  std::vector<double> data_;
};

namespace detail {

inline void debug_check_finite([[maybe_unused]] const Tensor& t, [[maybe_unused]] const char* op) {
#ifndef NDEBUG
  if (!t.all_finite()) throw std::domain_error(std::string(op) + " produced a non-finite value");
#endif
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                                " vs " + shape_string(b.shape()));
}

// Row-major GEMM kernels, C += op(A) * op(B). Loop orders keep the inner
// loop contiguous; accumulation order is fixed so results are reproducible.

// C[m,n] += A[m,k] * B[k,n]
inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                    double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n]
inline void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                    double* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = a[p * m + i];
      if (av == 0.0) continue;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
inline void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                    double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      // four independent partial sums, combined in a fixed order
      double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
      std::size_t p = 0;
      for (; p + 4 <= k; p += 4) {
        s0 += arow[p] * brow[p];
        s1 += arow[p + 1] * brow[p + 1];
        s2 += arow[p + 2] * brow[p + 2];
        s3 += arow[p + 3] * brow[p + 3];
      }
      for (; p < k; ++p) s0 += arow[p] * brow[p];
      c[i * n + j] += (s0 + s1) + (s2 + s3);
    }
  }
}

}  // namespace detail

template <typename F>
Tensor map(const Tensor& t, F&& fn) {
  Tensor out = t;
  for (auto& v : out.data()) v = fn(v);
  detail::debug_check_finite(out, "map");
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  detail::debug_check_finite(out, "add");
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  detail::debug_check_finite(out, "sub");
  return out;
}

/// Elementwise (Hadamard) product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  detail::debug_check_finite(out, "mul");
  return out;
}

inline Tensor scale(const Tensor& a, double s) {
  return map(a, [s](double v) { return v * s; });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  return map(a, [s](double v) { return v + s; });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                                shape_string(b.shape()));
  Tensor out = Tensor::zeros({a.dim(0), b.dim(1)});
  detail::gemm_nn(a.dim(0), b.dim(1), a.dim(1), a.data().data(), b.data().data(), out.data().data());
  detail::debug_check_finite(out, "matmul");
  return out;
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose: expected rank 2, got " + shape_string(a.shape()));
  Tensor out = Tensor::zeros({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) out.at(j, i) = a.at(i, j);
  return out;
}

/// Sum over one axis; the axis is dropped (a rank-1 input yields shape [1]).
inline Tensor reduce_sum(const Tensor& a, std::size_t axis) {
  if (axis >= a.rank())
    throw std::invalid_argument("reduce_sum: axis " + std::to_string(axis) + " out of range for " +
                                shape_string(a.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  const std::size_t len = a.dim(axis);
  Shape out_shape;
  for (std::size_t i = 0; i < a.rank(); ++i)
    if (i != axis) out_shape.push_back(a.dim(i));
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out = Tensor::zeros(out_shape);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += a[(o * len + l) * inner + i];
  return out;
}

inline Tensor reduce_mean(const Tensor& a, std::size_t axis) {
  const double n = static_cast<double>(a.shape().at(axis));
  return map(reduce_sum(a, axis), [n](double v) { return v / n; });
}

/// Left-to-right sum of every entry.
inline double sum_all(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

/// Mean of every entry of a 2-D feature map.
inline double spatial_mean(std::span<const double> map) {
  if (map.empty()) throw std::invalid_argument("spatial_mean: empty feature map");
  return sum_all(map) / static_cast<double>(map.size());
}

inline double spatial_mean(const Tensor& featmap) {
  if (featmap.rank() != 2)
    throw std::invalid_argument("spatial_mean: expected a [H,W] map, got " + shape_string(featmap.shape()));
  return spatial_mean(featmap.data());
}

// Binary blob: "CVT1", u32 rank, u64 dims..., little-endian f64 payload.

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline void write_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  write_u64(os, bits);
}

inline void read_exact(std::istream& is, unsigned char* dst, std::size_t n) {
  is.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw std::runtime_error("unexpected end of stream");
}

inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  read_exact(is, b, 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  read_exact(is, b, 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline double read_f64(std::istream& is) {
  const std::uint64_t bits = read_u64(is);
  double v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
  os.write("CVT1", 4);
  detail::write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) detail::write_u64(os, d);
  for (double v : t.data()) detail::write_f64(os, v);
}

inline Tensor read_tensor(std::istream& is) {
  unsigned char magic[4];
  detail::read_exact(is, magic, 4);
  if (std::memcmp(magic, "CVT1", 4) != 0) throw std::runtime_error("bad tensor blob magic");
  const std::uint32_t rank = detail::read_u32(is);
  if (rank == 0 || rank > 8) throw std::runtime_error("bad tensor blob rank " + std::to_string(rank));
  Shape shape(rank);
  std::uint64_t total = 1;
  for (auto& d : shape) {
    d = detail::read_u64(is);
    if (d == 0 || d > (std::uint64_t{1} << 32)) throw std::runtime_error("bad tensor blob dimension");
    total *= d;
    if (total > (std::uint64_t{1} << 34)) throw std::runtime_error("tensor blob too large");
  }
  std::vector<double> data(total);
  for (auto& v : data) v = detail::read_f64(is);
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace deepcarve
