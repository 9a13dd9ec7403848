#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tima/error.hpp"

namespace tima {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array of doubles. Scalars are 1x1 matrices; every
/// operation in the library works on rank-2 tensors, but the container
/// itself accepts any rank so checkpoints can describe arbitrary shapes.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    check_shape();
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (data_.size() != shape_size(shape_)) {
      throw Error(ErrorCode::ShapeMismatch, "data length " + std::to_string(data_.size()) +
                                                " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor({1, 1}, std::vector<double>{v}); }

  static Tensor zeros(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}, 0.0); }

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_, 0.0); }

  /// Builds a matrix from nested braces: Tensor::matrix({{1, 2}, {3, 4}}).
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::size_t r = rows.size();
    std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw Error(ErrorCode::ShapeMismatch, "ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  bool is_matrix() const noexcept { return shape_.size() == 2; }
  bool is_scalar() const noexcept { return data_.size() == 1; }

  std::size_t rows() const {
    require_matrix();
    return shape_[0];
  }
  std::size_t cols() const {
    require_matrix();
    return shape_[1];
  }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const double& operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  std::span<double> row(std::size_t r) { return std::span<double>(data_).subspan(r * cols(), cols()); }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * cols(), cols());
  }

  double item() const {
    if (!is_scalar()) throw Error(ErrorCode::NonScalarLoss, "item() on shape " + shape_string(shape_));
    return data_[0];
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  /// Bit-level equality (shape and every value), the notion used for
  /// determinism and immutability checks.
  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  void check_shape() const {
    for (std::size_t d : shape_) {
      if (d == 0) throw Error(ErrorCode::ShapeMismatch, "zero-sized dimension in " + shape_string(shape_));
    }
  }
  void require_matrix() const {
    if (shape_.size() != 2) throw Error(ErrorCode::ShapeMismatch, "expected a matrix, got " + shape_string(shape_));
  }

  Shape shape_;
  std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorCode::ShapeMismatch,
                std::string(what) + ": " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

/// Plain (untracked) C = A * B.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw Error(ErrorCode::ShapeMismatch, "matmul " + shape_string(a.shape()) + " * " + shape_string(b.shape()));
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Tensor c = Tensor::zeros(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    double* ci = &c(i, 0);
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a(i, p);
      if (aip == 0.0) continue;
      const double* bp = &b(p, 0);
      for (std::size_t j = 0; j < m; ++j) ci[j] += aip * bp[j];
    }
  }
  return c;
}

/// Plain C = A * B^T.
inline Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "matmul_bt " + shape_string(a.shape()) + " * " + shape_string(b.shape()) + "^T");
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  Tensor c = Tensor::zeros(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = &a(i, 0);
    for (std::size_t j = 0; j < m; ++j) {
      const double* bj = &b(j, 0);
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c(i, j) = s;
    }
  }
  return c;
}

/// Plain C = A^T * B.
inline Tensor matmul_at(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows()) {
    throw Error(ErrorCode::ShapeMismatch, "matmul_at " + shape_string(a.shape()) + "^T * " + shape_string(b.shape()));
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Tensor c = Tensor::zeros(k, m);
  for (std::size_t r = 0; r < n; ++r) {
    const double* ar = &a(r, 0);
    const double* br = &b(r, 0);
    for (std::size_t i = 0; i < k; ++i) {
      const double ari = ar[i];
      if (ari == 0.0) continue;
      double* ci = &c(i, 0);
      for (std::size_t j = 0; j < m; ++j) ci[j] += ari * br[j];
    }
  }
  return c;
}

inline Tensor transpose(const Tensor& a) {
  Tensor t = Tensor::zeros(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline double row_norm(std::span<const double> row) {
  double s = 0.0;
  for (double v : row) s += v * v;
  return std::sqrt(s);
}

/// Rows [begin, end) of a matrix as a new tensor.
inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  const std::size_t c = a.cols();
  std::vector<double> out(a.storage().begin() + static_cast<std::ptrdiff_t>(begin * c),
                          a.storage().begin() + static_cast<std::ptrdiff_t>(end * c));
  return Tensor({end - begin, c}, std::move(out));
}

inline Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  const std::size_t c = a.cols();
  Tensor out = Tensor::zeros(rows.size(), c);
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(&a(rows[i], 0), c, &out(i, 0));
  return out;
}

}  // namespace tima
