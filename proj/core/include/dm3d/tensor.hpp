#pragma once

#include <cstdint>
#include <initializer_list>
#include <vector>

namespace dm3d {

/// Dense row-major matrix of doubles. Everything numeric in this library is
/// two-dimensional; higher-rank data (e.g. N x K x D neighbor blocks) is
/// stored flattened as (N*K) x D with the group size tracked by the owner.
/// Scalars are 1x1.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::int64_t rows, std::int64_t cols);  // zero-initialized
  Tensor(std::int64_t rows, std::int64_t cols, std::vector<double> data);

  static Tensor full(std::int64_t rows, std::int64_t cols, double value);
  static Tensor scalar(double value) { return full(1, 1, value); }
  /// Row-major literal, e.g. Tensor::of(2, 2, {1, 2, 3, 4}).
  static Tensor of(std::int64_t rows, std::int64_t cols,
                   std::initializer_list<double> values);
  static Tensor identity(std::int64_t n);

  std::int64_t rows() const { return rows_; }
  std::int64_t cols() const { return cols_; }
  std::int64_t size() const { return rows_ * cols_; }
  bool empty() const { return size() == 0; }
  bool same_shape(const Tensor& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  double& operator()(std::int64_t r, std::int64_t c) {
    return data_[r * cols_ + c];
  }
  double operator()(std::int64_t r, std::int64_t c) const {
    return data_[r * cols_ + c];
  }
  double& operator[](std::int64_t i) { return data_[i]; }
  double operator[](std::int64_t i) const { return data_[i]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  void fill(double value);
  bool all_finite() const;

  /// Largest |a - b| over all entries; shapes must match.
  static double max_abs_diff(const Tensor& a, const Tensor& b);
  double max_abs() const;
  double frobenius_norm() const;

 private:
  std::int64_t rows_ = 0;
  std::int64_t cols_ = 0;
  std::vector<double> data_;
};

// Basic dense ops used by the non-differentiable paths and by tests.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

}  // namespace dm3d
