#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "diffhybrid/errors.hpp"
#include "diffhybrid/sparse.hpp"

namespace diffhybrid {

/// Lower clamp applied to sqrt/log arguments when differentiating and to
/// variances wherever they are divided by or logged.
inline constexpr double kVarianceFloor = 1e-12;

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(const Shape& s) {
  return "[" + std::to_string(s.rows) + "x" + std::to_string(s.cols) + "]";
}

/// Dense row-major array of rank <= 2. The eager (tape-free) value type.
class Array {
 public:
  Array() = default;
  Array(std::size_t rows, std::size_t cols, double fill = 0.0)
      : shape_{rows, cols}, data_(rows * cols, fill) {}
  Array(std::size_t rows, std::size_t cols, std::vector<double> data)
      : shape_{rows, cols}, data_(std::move(data)) {
    if (data_.size() != shape_.size()) {
      throw ConfigError("Array: data length " + std::to_string(data_.size()) +
                        " does not match shape " + to_string(shape_));
    }
  }

  static Array scalar(double v) { return Array(1, 1, v); }
  static Array row(std::span<const double> v) {
    return Array(1, v.size(), std::vector<double>(v.begin(), v.end()));
  }
  static Array row(std::initializer_list<double> v) {
    return Array(1, v.size(), std::vector<double>(v));
  }
  static Array column(std::span<const double> v) {
    return Array(v.size(), 1, std::vector<double>(v.begin(), v.end()));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rows() const { return shape_.rows; }
  std::size_t cols() const { return shape_.cols; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_.cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_.cols + c]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  /// Value of a 1x1 array.
  double item() const {
    if (data_.size() != 1) throw ConfigError("Array::item on non-scalar " + to_string(shape_));
    return data_[0];
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  Array& operator+=(const Array& o);

 private:
  Shape shape_;
  std::vector<double> data_;
};

namespace kernel {

inline void require_same(std::string_view op, const Shape& a, const Shape& b) {
  if (!(a == b)) {
    throw ConfigError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " +
                      to_string(b));
  }
}

template <class F>
Array map(const Array& a, F f) {
  Array out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

template <class F>
Array zip(std::string_view op, const Array& a, const Array& b, F f) {
  require_same(op, a.shape(), b.shape());
  Array out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Array matmul(const Array& a, const Array& b) {
  if (a.cols() != b.rows()) {
    throw ConfigError("matmul: inner dimensions differ " + to_string(a.shape()) + " vs " +
                      to_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Array out(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a(i, p);
      if (aip == 0.0) continue;
      const double* brow = b.values().data() + p * n;
      double* orow = out.values().data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return out;
}

/// out += a^T b
inline void matmul_tn_add(const Array& a, const Array& b, Array& out) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a.values().data() + i * k;
    const double* brow = b.values().data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = arow[p];
      if (aip == 0.0) continue;
      double* orow = out.values().data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
}

/// out += a b^T
inline void matmul_nt_add(const Array& a, const Array& b, Array& out) {
  const std::size_t m = a.rows(), n = a.cols(), k = b.rows();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a.values().data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b.values().data() + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      out(i, p) += acc;
    }
  }
}

inline Array concat_rows(std::span<const Array* const> parts) {
  if (parts.empty()) throw ConfigError("concat: no inputs");
  const std::size_t cols = parts.front()->cols();
  std::size_t rows = 0;
  for (const Array* p : parts) {
    if (p->cols() != cols) {
      throw ConfigError("concat: column count mismatch " + to_string(parts.front()->shape()) +
                        " vs " + to_string(p->shape()));
    }
    rows += p->rows();
  }
  Array out(rows, cols);
  std::size_t offset = 0;
  for (const Array* p : parts) {
    std::copy(p->values().begin(), p->values().end(), out.values().begin() + offset);
    offset += p->size();
  }
  return out;
}

inline Array slice_rows(const Array& a, std::size_t r0, std::size_t r1) {
  if (r0 >= r1 || r1 > a.rows()) {
    throw ConfigError("slice: rows [" + std::to_string(r0) + "," + std::to_string(r1) +
                      ") outside " + to_string(a.shape()));
  }
  Array out(r1 - r0, a.cols());
  std::copy(a.values().begin() + r0 * a.cols(), a.values().begin() + r1 * a.cols(),
            out.values().begin());
  return out;
}

inline Array broadcast_cols(const Array& a, std::size_t n) {
  if (a.cols() != 1) throw ConfigError("broadcast: expects a column, got " + to_string(a.shape()));
  Array out(a.rows(), n);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    std::fill_n(out.values().begin() + r * n, n, a[r]);
  }
  return out;
}

inline Array reshape(const Array& a, std::size_t rows, std::size_t cols) {
  if (rows * cols != a.size()) {
    throw ConfigError("reshape: cannot view " + to_string(a.shape()) + " as " +
                      to_string(Shape{rows, cols}));
  }
  return Array(rows, cols, a.storage());
}

inline Array apply(const SparseMatrix& m, const Array& a) {
  if (a.cols() != m.cols()) {
    throw ConfigError("linear_map: map expects " + std::to_string(m.cols()) +
                      " columns, got " + to_string(a.shape()));
  }
  Array out(a.rows(), m.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    m.multiply(a.values().data() + r * a.cols(), out.values().data() + r * m.rows());
  }
  return out;
}

inline Array gather(const Array& a, std::span<const std::size_t> idx) {
  Array out(a.rows(), idx.size());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t j = 0; j < idx.size(); ++j) {
      if (idx[j] >= a.cols()) throw ConfigError("gather: index out of range");
      out(r, j) = a(r, idx[j]);
    }
  }
  return out;
}

}  // namespace kernel

inline Array& Array::operator+=(const Array& o) {
  kernel::require_same("add", shape_, o.shape_);
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
  return *this;
}

// Eager operations. The same names exist for ad::Var so algorithm templates
// can be instantiated on either type.

inline Array operator+(const Array& a, const Array& b) {
  return kernel::zip("add", a, b, [](double x, double y) { return x + y; });
}
inline Array operator-(const Array& a, const Array& b) {
  return kernel::zip("sub", a, b, [](double x, double y) { return x - y; });
}
inline Array operator*(const Array& a, const Array& b) {
  return kernel::zip("mul", a, b, [](double x, double y) { return x * y; });
}
inline Array operator/(const Array& a, const Array& b) {
  return kernel::zip("div", a, b, [](double x, double y) { return x / y; });
}
inline Array operator-(const Array& a) {
  return kernel::map(a, [](double x) { return -x; });
}
inline Array operator*(const Array& a, double k) {
  return kernel::map(a, [k](double x) { return x * k; });
}
inline Array operator*(double k, const Array& a) { return a * k; }
inline Array operator/(const Array& a, double k) { return a * (1.0 / k); }
inline Array operator+(const Array& a, double k) {
  return kernel::map(a, [k](double x) { return x + k; });
}
inline Array operator+(double k, const Array& a) { return a + k; }
inline Array operator-(const Array& a, double k) { return a + (-k); }
inline Array operator-(double k, const Array& a) { return (-a) + k; }

inline Array square(const Array& a) {
  return kernel::map(a, [](double x) { return x * x; });
}
inline Array sqrt(const Array& a) {
  return kernel::map(a, [](double x) { return std::sqrt(std::max(x, 0.0)); });
}
inline Array exp(const Array& a) {
  return kernel::map(a, [](double x) { return std::exp(x); });
}
inline Array log(const Array& a) {
  return kernel::map(a, [](double x) { return std::log(std::max(x, kVarianceFloor)); });
}
inline Array sin(const Array& a) {
  return kernel::map(a, [](double x) { return std::sin(x); });
}
inline Array cos(const Array& a) {
  return kernel::map(a, [](double x) { return std::cos(x); });
}
inline Array tanh(const Array& a) {
  return kernel::map(a, [](double x) { return std::tanh(x); });
}
inline Array softplus(const Array& a) { return kernel::map(a, kernel::softplus); }
inline Array pow(const Array& a, double p) {
  return kernel::map(a, [p](double x) { return std::pow(x, p); });
}
inline Array clamp_min(const Array& a, double lo) {
  return kernel::map(a, [lo](double x) { return std::max(x, lo); });
}
inline Array sum(const Array& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  return Array::scalar(acc);
}
inline Array mean(const Array& a) {
  if (a.empty()) throw ConfigError("mean: empty input");
  return Array::scalar(sum(a).item() / static_cast<double>(a.size()));
}
inline Array matmul(const Array& a, const Array& b) { return kernel::matmul(a, b); }
inline Array concat_rows(std::span<const Array> parts) {
  std::vector<const Array*> ptrs;
  ptrs.reserve(parts.size());
  for (const auto& p : parts) ptrs.push_back(&p);
  return kernel::concat_rows(ptrs);
}
inline Array slice_rows(const Array& a, std::size_t r0, std::size_t r1) {
  return kernel::slice_rows(a, r0, r1);
}
inline Array broadcast_cols(const Array& a, std::size_t n) { return kernel::broadcast_cols(a, n); }
inline Array reshape(const Array& a, std::size_t rows, std::size_t cols) {
  return kernel::reshape(a, rows, cols);
}
inline Array apply(const std::shared_ptr<const SparseMatrix>& m, const Array& a) {
  return kernel::apply(*m, a);
}
inline Array gather(const Array& a, const std::shared_ptr<const std::vector<std::size_t>>& idx) {
  return kernel::gather(a, *idx);
}

/// Builds a constant of the same kind as `like` (identity for eager arrays).
inline Array constant_like(const Array& /*like*/, Array value) { return value; }

/// Scalar double overloads used when algorithm templates run on plain scalars.
inline double square(double x) { return x * x; }
inline double softplus(double x) { return kernel::softplus(x); }

}  // namespace diffhybrid
