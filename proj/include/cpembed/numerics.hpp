#pragma once

// Dense kernels shared by the engine, steering and evaluation code.
// Every reduction runs left to right over its index in 64-bit floats so that
// results are reproducible bit-for-bit across runs and thread counts.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cpembed/errors.hpp"

namespace cpembed {

class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t dim, double fill = 0.0) : data_(dim, fill) {}
  explicit Vector(std::vector<double> data) : data_(std::move(data)) {}
  Vector(std::initializer_list<double> init) : data_(init) {}
  explicit Vector(std::span<const double> s) : data_(s.begin(), s.end()) {}

  std::size_t dim() const noexcept { return data_.size(); }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> span() noexcept { return data_; }
  std::span<const double> span() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  bool operator==(const Vector&) const = default;

 private:
  std::vector<double> data_;
};

// Row-major dense matrix. Weight tensors use float storage; every kernel
// accumulates in double regardless of the element type.
template <typename T>
class BasicMatrix {
 public:
  using value_type = T;

  BasicMatrix() = default;
  BasicMatrix(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                       " does not match " + std::to_string(rows_) + "x" +
                       std::to_string(cols_));
    }
  }
  BasicMatrix(std::initializer_list<std::initializer_list<T>> init) {
    rows_ = init.size();
    cols_ = rows_ ? init.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& row : init) {
      if (row.size() != cols_) throw ShapeError("ragged matrix literal");
      data_.insert(data_.end(), row.begin(), row.end());
    }
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  T operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<T> flat() noexcept { return data_; }
  std::span<const T> flat() const noexcept { return data_; }

  bool operator==(const BasicMatrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Matrix = BasicMatrix<double>;
using WeightMatrix = BasicMatrix<float>;

inline Vector row_vector(const Matrix& m, std::size_t r) {
  return Vector(m.row(r));
}

inline void set_row(Matrix& m, std::size_t r, const Vector& v) {
  if (v.dim() != m.cols()) throw ShapeError("row length mismatch");
  std::copy(v.begin(), v.end(), m.row(r).begin());
}

// out(i,j) accumulates a(i,k)*b(k,j) for k = 0,1,2,... in that order; the
// i-k-j loop nest keeps that order while walking b by rows.
template <typename T>
Matrix matmul(const Matrix& a, const BasicMatrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul shape mismatch: " + std::to_string(a.rows()) +
                     "x" + std::to_string(a.cols()) + " * " +
                     std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  Matrix out(a.rows(), b.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      auto b_row = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) {
        out_row[j] += aik * static_cast<double>(b_row[j]);
      }
    }
  }
  return out;
}

template <typename T>
Vector vecmat(const Vector& v, const BasicMatrix<T>& b) {
  if (v.dim() != b.rows()) throw ShapeError("vecmat shape mismatch");
  Vector out(b.cols(), 0.0);
  for (std::size_t k = 0; k < v.dim(); ++k) {
    const double vk = v[k];
    auto b_row = b.row(k);
    for (std::size_t j = 0; j < b.cols(); ++j) {
      out[j] += vk * static_cast<double>(b_row[j]);
    }
  }
  return out;
}

// In-place softmax of one row with max subtraction; -inf entries map to 0.
inline void softmax_inplace(std::span<double> row) {
  double max = -std::numeric_limits<double>::infinity();
  for (double x : row) max = std::max(max, x);
  if (std::isinf(max) && max < 0) {
    throw DegenerateError("softmax row is fully masked");
  }
  double sum = 0.0;
  for (double& x : row) {
    x = std::exp(x - max);
    sum += x;
  }
  for (double& x : row) x /= sum;
}

inline Matrix softmax_rows(Matrix m) {
  for (std::size_t r = 0; r < m.rows(); ++r) softmax_inplace(m.row(r));
  return m;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot dimension mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double l2_norm(const Vector& v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}

inline double cosine_similarity(const Vector& a, const Vector& b) {
  if (a.dim() != b.dim()) throw ShapeError("cosine dimension mismatch");
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) {
    throw DegenerateError("cosine similarity of a zero-norm vector");
  }
  return dot(a.span(), b.span()) / (na * nb);
}

template <typename T>
Vector rms_norm(std::span<const double> v, std::span<const T> gain,
                double eps) {
  if (v.size() != gain.size()) throw ShapeError("rms_norm gain mismatch");
  double sq = 0.0;
  for (double x : v) sq += x * x;
  const double inv = 1.0 / std::sqrt(sq / static_cast<double>(v.size()) + eps);
  Vector out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = v[i] * inv * static_cast<double>(gain[i]);
  }
  return out;
}

inline Vector rms_norm(const Vector& v, const Vector& gain, double eps) {
  return rms_norm<double>(v.span(), gain.span(), eps);
}

template <typename T>
Matrix rms_norm_rows(const Matrix& m, std::span<const T> gain, double eps) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    Vector normed = rms_norm<T>(m.row(r), gain, eps);
    std::copy(normed.begin(), normed.end(), out.row(r).begin());
  }
  return out;
}

inline Vector operator-(const Vector& a, const Vector& b) {
  if (a.dim() != b.dim()) throw ShapeError("vector dimension mismatch");
  Vector out(a.dim());
  for (std::size_t i = 0; i < a.dim(); ++i) out[i] = a[i] - b[i];
  return out;
}

inline Vector operator+(const Vector& a, const Vector& b) {
  if (a.dim() != b.dim()) throw ShapeError("vector dimension mismatch");
  Vector out(a.dim());
  for (std::size_t i = 0; i < a.dim(); ++i) out[i] = a[i] + b[i];
  return out;
}

inline Vector operator*(double s, const Vector& v) {
  Vector out(v.dim());
  for (std::size_t i = 0; i < v.dim(); ++i) out[i] = s * v[i];
  return out;
}

inline Matrix operator+(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("matrix add shape mismatch");
  }
  Matrix out(a.rows(), a.cols());
  auto fa = a.flat();
  auto fb = b.flat();
  auto fo = out.flat();
  for (std::size_t i = 0; i < fo.size(); ++i) fo[i] = fa[i] + fb[i];
  return out;
}

template <typename T>
bool all_finite(std::span<const T> data) {
  return std::all_of(data.begin(), data.end(),
                     [](T x) { return std::isfinite(x); });
}

}  // namespace cpembed
