// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fas/errors.hpp"

namespace fas {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major array. Value semantic; copies are deep.
template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  static BasicTensor scalar(T value) { return BasicTensor(Shape{1}, std::vector<T>{value}); }

  static BasicTensor identity(std::size_t n) {
    BasicTensor out({n, n});
    for (std::size_t i = 0; i < n; ++i) out.at(i, i) = T{1};
    return out;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  /// Rows/cols of a rank-2 view; rank-1 tensors are a single row.
  std::size_t rows() const { return rank() == 1 ? 1 : shape_.at(0); }
  std::size_t cols() const { return rank() == 1 ? shape_.at(0) : shape_.at(1); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  T item() const {
    if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  BasicTensor reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return BasicTensor(std::move(shape), data_);
  }

  template <class U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

namespace detail {

template <class T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <class T>
void require_rank2(const BasicTensor<T>& a, const char* op) {
  if (a.rank() != 2) throw DimensionError(std::string(op) + ": expected rank-2, got " + shape_str(a.shape()));
}

}  // namespace detail

/// Row-major matrix product. Each output entry accumulates over the inner index in
/// ascending order, so results are identical across runs and builds.
template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  BasicTensor<T> out({n, m});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* pc = out.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    T* row = pc + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const T s = pa[i * k + p];
      const T* brow = pb + p * m;
      for (std::size_t j = 0; j < m; ++j) row[j] += s * brow[j];
    }
  }
  return out;
}

template <class T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  detail::require_rank2(a, "transpose");
  const std::size_t n = a.dim(0), m = a.dim(1);
  BasicTensor<T> out({m, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

template <class T, class F>
BasicTensor<T> map(const BasicTensor<T>& a, F&& fn) {
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = fn(a[i]);
  return out;
}

template <class T, class F>
BasicTensor<T> zip(const BasicTensor<T>& a, const BasicTensor<T>& b, F&& fn, const char* op = "zip") {
  detail::require_same_shape(a, b, op);
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = fn(a[i], b[i]);
  return out;
}

template <class T>
BasicTensor<T> operator+(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return zip(a, b, std::plus<T>{}, "add");
}
template <class T>
BasicTensor<T> operator-(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return zip(a, b, std::minus<T>{}, "sub");
}
template <class T>
BasicTensor<T> hadamard(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return zip(a, b, std::multiplies<T>{}, "hadamard");
}
template <class T>
BasicTensor<T> operator*(const BasicTensor<T>& a, T s) {
  return map(a, [s](T v) { return v * s; });
}

/// a[r, c] + v[c] for every row r.
template <class T>
BasicTensor<T> add_row(const BasicTensor<T>& a, const BasicTensor<T>& v) {
  if (v.size() != a.cols()) {
    throw DimensionError("add_row: row vector " + shape_str(v.shape()) + " vs " + shape_str(a.shape()));
  }
  BasicTensor<T> out = a;
  const std::size_t m = a.cols();
  for (std::size_t i = 0; i < a.size(); ++i) out[i] += v[i % m];
  return out;
}

/// a[r, c] * v[c] for every row r.
template <class T>
BasicTensor<T> mul_row(const BasicTensor<T>& a, const BasicTensor<T>& v) {
  if (v.size() != a.cols()) {
    throw DimensionError("mul_row: row vector " + shape_str(v.shape()) + " vs " + shape_str(a.shape()));
  }
  BasicTensor<T> out = a;
  const std::size_t m = a.cols();
  for (std::size_t i = 0; i < a.size(); ++i) out[i] *= v[i % m];
  return out;
}

/// Sum over rows, giving one value per column.
template <class T>
BasicTensor<T> column_sum(const BasicTensor<T>& a) {
  const std::size_t m = a.cols();
  BasicTensor<T> out({m});
  for (std::size_t i = 0; i < a.size(); ++i) out[i % m] += a[i];
  return out;
}

/// Repeats a row vector `n` times into an [n, len] tensor.
template <class T>
BasicTensor<T> broadcast_rows(const BasicTensor<T>& v, std::size_t n) {
  BasicTensor<T> out({n, v.size()});
  for (std::size_t r = 0; r < n; ++r) std::copy(v.data().begin(), v.data().end(), out.data().begin() + r * v.size());
  return out;
}

template <class T>
T sum(const BasicTensor<T>& a) {
  T acc{0};
  for (T v : a.data()) acc += v;
  return acc;
}

template <class T>
T mean(const BasicTensor<T>& a) {
  return a.empty() ? T{0} : sum(a) / static_cast<T>(a.size());
}

template <class T>
T max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "max_abs_diff");
  T m{0};
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, static_cast<T>(std::abs(a[i] - b[i])));
  return m;
}

template <class T>
double mse(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "mse");
  if (a.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

/// Gathers the given rows of a rank-2 tensor.
template <class T>
BasicTensor<T> take_rows(const BasicTensor<T>& a, std::span<const std::size_t> rows) {
  detail::require_rank2(a, "take_rows");
  const std::size_t m = a.dim(1);
  BasicTensor<T> out({rows.size(), m});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= a.dim(0)) throw DimensionError("take_rows: row index out of range");
    std::copy_n(a.data().begin() + rows[i] * m, m, out.data().begin() + i * m);
  }
  return out;
}

template <class T>
BasicTensor<T> slice_rows(const BasicTensor<T>& a, std::size_t begin, std::size_t end) {
  detail::require_rank2(a, "slice_rows");
  if (begin > end || end > a.dim(0)) throw DimensionError("slice_rows: range out of bounds");
  const std::size_t m = a.dim(1);
  std::vector<T> data(a.data().begin() + begin * m, a.data().begin() + end * m);
  return BasicTensor<T>({end - begin, m}, std::move(data));
}

/// Row-wise argmax of a rank-2 tensor; ties resolve to the lowest index.
template <class T>
std::vector<std::size_t> argmax_rows(const BasicTensor<T>& a) {
  detail::require_rank2(a, "argmax_rows");
  std::vector<std::size_t> out(a.dim(0));
  const std::size_t m = a.dim(1);
  for (std::size_t r = 0; r < a.dim(0); ++r) {
    auto row = a.data().subspan(r * m, m);
    out[r] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

/// Linear-interpolated percentile (q in [0, 100]) of an unsorted sample.
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ParameterError("percentile of empty sample");
  if (q < 0.0 || q > 100.0) throw ParameterError("percentile rank must lie in [0, 100]");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

}  // namespace fas
