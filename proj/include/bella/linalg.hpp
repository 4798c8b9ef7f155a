#pragma once

// Dense row-major matrices of doubles and the handful of kernels the rest of
// the library is written against.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace bella {

class ShapeError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Allocation instrumentation. Every Matrix construction with a nonzero element
// count is recorded, so callers can assert that a code path never builds a
// temporary above some size (the trace-trick kernel relies on this).
struct AllocationStats {
  std::atomic<std::size_t> count{0};
  std::atomic<std::size_t> largest{0};

  void reset() {
    count = 0;
    largest = 0;
  }
  void record(std::size_t elements) {
    count.fetch_add(1, std::memory_order_relaxed);
    std::size_t prev = largest.load(std::memory_order_relaxed);
    while (prev < elements &&
           !largest.compare_exchange_weak(prev, elements, std::memory_order_relaxed)) {
    }
  }
};

inline AllocationStats& allocation_stats() {
  static AllocationStats stats;
  return stats;
}

class Matrix {
public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    if (!data_.empty()) allocation_stats().record(data_.size());
  }

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("Matrix: data length " + std::to_string(data_.size()) +
                       " does not match " + shape_string(rows_, cols_));
    }
    if (!data_.empty()) allocation_stats().record(data_.size());
  }

  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& row : rows) {
      if (row.size() != cols_) throw ShapeError("Matrix: ragged initializer list");
      data_.insert(data_.end(), row.begin(), row.end());
    }
    if (!data_.empty()) allocation_stats().record(data_.size());
  }

  Matrix(const Matrix& other) : rows_(other.rows_), cols_(other.cols_), data_(other.data_) {
    if (!data_.empty()) allocation_stats().record(data_.size());
  }
  Matrix& operator=(const Matrix& other) {
    if (this != &other) {
      rows_ = other.rows_;
      cols_ = other.cols_;
      data_ = other.data_;
      if (!data_.empty()) allocation_stats().record(data_.size());
    }
    return *this;
  }
  Matrix(Matrix&&) noexcept = default;
  Matrix& operator=(Matrix&&) noexcept = default;

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  bool same_shape(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  std::string shape() const { return shape_string(rows_, cols_); }

  static std::string shape_string(std::size_t r, std::size_t c) {
    return std::to_string(r) + "x" + std::to_string(c);
  }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

namespace detail {

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape() + " vs " + b.shape());
  }
}

}  // namespace detail

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: cannot multiply " + a.shape() + " by " + b.shape());
  }
  Matrix out(a.rows(), b.cols());
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  // i-k-j order keeps the inner loop contiguous in both b and out.
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = out.row(i).data();
    const double* arow = a.row(i).data();
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b.row(p).data();
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

// a * b^T without forming the transpose.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: cannot multiply " + a.shape() + " by transpose of " + b.shape());
  }
  Matrix out(a.rows(), b.rows());
  const std::size_t k = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* arow = a.row(i).data();
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double* brow = b.row(j).data();
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      out(i, j) = s;
    }
  }
  return out;
}

// a^T * b without forming the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: cannot multiply transpose of " + a.shape() + " by " + b.shape());
  }
  Matrix out(a.cols(), b.cols());
  for (std::size_t p = 0; p < a.rows(); ++p) {
    const double* arow = a.row(p).data();
    const double* brow = b.row(p).data();
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* orow = out.row(i).data();
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

inline Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

inline double frobenius_dot(const Matrix& a, const Matrix& b) {
  detail::require_same_shape(a, b, "frobenius_dot");
  const auto x = a.data();
  const auto y = b.data();
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

inline double squared_norm(const Matrix& a) { return frobenius_dot(a, a); }

// a + alpha * b
inline Matrix add_scaled(const Matrix& a, const Matrix& b, double alpha) {
  detail::require_same_shape(a, b, "add_scaled");
  Matrix out = a;
  auto o = out.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += alpha * y[i];
  return out;
}

// In-place y += alpha * x.
inline void axpy(Matrix& y, const Matrix& x, double alpha) {
  detail::require_same_shape(y, x, "axpy");
  auto o = y.data();
  const auto v = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += alpha * v[i];
}

inline Matrix scale(const Matrix& a, double s) {
  Matrix out = a;
  for (double& v : out.data()) v *= s;
  return out;
}

inline Matrix map(const Matrix& a, const std::function<double(double)>& f) {
  Matrix out = a;
  for (double& v : out.data()) v = f(v);
  return out;
}

// Column index of the maximum of each row; ties go to the lowest index.
inline std::vector<std::size_t> argmax_rows(const Matrix& a) {
  std::vector<std::size_t> out(a.rows(), 0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto r = a.row(i);
    std::size_t best = 0;
    for (std::size_t j = 1; j < r.size(); ++j)
      if (r[j] > r[best]) best = j;
    out[i] = best;
  }
  return out;
}

inline bool all_finite(const Matrix& a) {
  return std::all_of(a.data().begin(), a.data().end(), [](double v) { return std::isfinite(v); });
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  detail::require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

// Rows of `a` selected by `indices`, in the given order.
inline Matrix gather_rows(const Matrix& a, std::span<const std::size_t> indices) {
  Matrix out(indices.size(), a.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto src = a.row(indices[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

}  // namespace bella
