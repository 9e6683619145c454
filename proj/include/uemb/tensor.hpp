#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "uemb/error.hpp"

namespace uemb {

namespace detail {

inline void require_finite(std::span<const double> values, const char* what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw DegenerateInputError(std::string(what) + ": non-finite value at index " +
                                 std::to_string(i));
    }
  }
}

}  // namespace detail

/// A single embedding or bias vector. Entries are finite.
class RowVector {
 public:
  RowVector() = default;
  explicit RowVector(std::size_t dim, double fill = 0.0) : values_(dim, fill) {}
  explicit RowVector(std::vector<double> values) : values_(std::move(values)) {
    detail::require_finite(values_, "RowVector");
  }
  RowVector(std::initializer_list<double> values) : RowVector(std::vector<double>(values)) {}
  explicit RowVector(std::span<const double> values)
      : RowVector(std::vector<double>(values.begin(), values.end())) {}

  std::size_t dim() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }

  std::span<const double> values() const noexcept { return values_; }
  std::span<double> values() noexcept { return values_; }
  operator std::span<const double>() const noexcept { return values_; }

  auto begin() const noexcept { return values_.begin(); }
  auto end() const noexcept { return values_.end(); }

  friend bool operator==(const RowVector&, const RowVector&) = default;

 private:
  std::vector<double> values_;
};

/// Row-major matrix of doubles. Entries are finite on construction.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), values_(rows * cols, fill) {
    if (!std::isfinite(fill)) {
      throw DegenerateInputError("DenseMatrix: non-finite fill value");
    }
  }
  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> values)
      : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows_ * cols_) {
      throw DimensionError("DenseMatrix: " + std::to_string(values_.size()) +
                           " values for a " + std::to_string(rows_) + "x" +
                           std::to_string(cols_) + " matrix");
    }
    detail::require_finite(values_, "DenseMatrix");
  }
  DenseMatrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    values_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) {
        throw DimensionError("DenseMatrix: ragged initializer");
      }
      values_.insert(values_.end(), r.begin(), r.end());
    }
    detail::require_finite(values_, "DenseMatrix");
  }

  static DenseMatrix identity(std::size_t n) {
    DenseMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  /// Stacks equally sized vectors as rows.
  static DenseMatrix from_rows(std::span<const RowVector> rows) {
    if (rows.empty()) return {};
    DenseMatrix m(rows.size(), rows.front().dim());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].dim() != m.cols_) throw DimensionError("DenseMatrix::from_rows: ragged rows");
      std::copy(rows[i].begin(), rows[i].end(), m.row(i).begin());
    }
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return values_.size(); }

  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }
  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }

  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(values_).subspan(r * cols_, cols_);
  }
  std::span<double> row(std::size_t r) { return std::span<double>(values_).subspan(r * cols_, cols_); }

  std::span<const double> values() const noexcept { return values_; }
  std::span<double> values() noexcept { return values_; }

  /// Copies the listed rows, in order, into a new matrix.
  DenseMatrix gather_rows(std::span<const std::size_t> indices) const {
    DenseMatrix out(indices.size(), cols_);
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (indices[i] >= rows_) throw DimensionError("gather_rows: row index out of range");
      std::copy_n(row(indices[i]).begin(), cols_, out.row(i).begin());
    }
    return out;
  }

  /// Rows [first, first + count).
  DenseMatrix slice_rows(std::size_t first, std::size_t count) const {
    if (first + count > rows_) throw DimensionError("slice_rows: range out of bounds");
    DenseMatrix out(count, cols_);
    std::copy_n(values_.begin() + static_cast<std::ptrdiff_t>(first * cols_), count * cols_,
                out.values_.begin());
    return out;
  }

  friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionError("dot: length " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

/// Cosine of the angle between a and b, clamped to [-1, 1]. Zero-norm input throws.
inline double cosine_sim(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionError("cosine_sim: dim " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
  }
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  if (!(na > 0.0) || !(nb > 0.0)) {
    throw DegenerateInputError("cosine_sim: zero-norm input");
  }
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

inline RowVector l2_normalize(std::span<const double> v) {
  const double n = l2_norm(v);
  if (!(n > 0.0)) throw DegenerateInputError("l2_normalize: zero vector");
  std::vector<double> out(v.begin(), v.end());
  for (double& x : out) x /= n;
  return RowVector(std::move(out));
}

/// Entry (i, j) is cosine_sim(queries.row(i), targets.row(j)).
inline DenseMatrix similarity_matrix(const DenseMatrix& queries, const DenseMatrix& targets) {
  if (queries.cols() != targets.cols()) {
    throw DimensionError("similarity_matrix: query dim " + std::to_string(queries.cols()) +
                         " vs target dim " + std::to_string(targets.cols()));
  }
  auto norms = [](const DenseMatrix& m, const char* which) {
    std::vector<double> out(m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) {
      out[i] = l2_norm(m.row(i));
      if (!(out[i] > 0.0)) {
        throw DegenerateInputError(std::string("similarity_matrix: zero-norm ") + which +
                                   " row " + std::to_string(i));
      }
    }
    return out;
  };
  const auto qn = norms(queries, "query");
  const auto tn = norms(targets, "target");
  DenseMatrix out(queries.rows(), targets.rows());
  for (std::size_t i = 0; i < queries.rows(); ++i) {
    for (std::size_t j = 0; j < targets.rows(); ++j) {
      out(i, j) = std::clamp(dot(queries.row(i), targets.row(j)) / (qn[i] * tn[j]), -1.0, 1.0);
    }
  }
  return out;
}

/// log(sum(exp(v))) evaluated around the maximum so large logits stay finite.
inline double log_sum_exp(std::span<const double> v) {
  if (v.empty()) throw DegenerateInputError("log_sum_exp: empty input");
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) throw DegenerateInputError("log_sum_exp: non-finite input");
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - m);
  return m + std::log(acc);
}

}  // namespace uemb
