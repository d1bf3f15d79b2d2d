#include "dm3d/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dm3d {

Tensor::Tensor(std::int64_t rows, std::int64_t cols)
    : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows * cols), 0.0) {
  if (rows < 0 || cols < 0) throw std::invalid_argument("Tensor: negative shape");
}

Tensor::Tensor(std::int64_t rows, std::int64_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (static_cast<std::int64_t>(data_.size()) != rows * cols)
    throw std::invalid_argument("Tensor: data size does not match shape");
}

Tensor Tensor::full(std::int64_t rows, std::int64_t cols, double value) {
  Tensor t(rows, cols);
  t.fill(value);
  return t;
}

Tensor Tensor::of(std::int64_t rows, std::int64_t cols,
                  std::initializer_list<double> values) {
  return Tensor(rows, cols, std::vector<double>(values));
}

Tensor Tensor::identity(std::int64_t n) {
  Tensor t(n, n);
  for (std::int64_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

double Tensor::max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

double Tensor::frobenius_norm() const {
  double s = 0.0;
  for (double v : data_) s += v * v;
  return std::sqrt(s);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dim mismatch");
  Tensor out(a.rows(), b.cols());
  const std::int64_t n = a.rows(), k = a.cols(), m = b.cols();
  for (std::int64_t i = 0; i < n; ++i) {
    const double* arow = a.data() + i * k;
    double* orow = out.data() + i * m;
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b.data() + p * m;
      for (std::int64_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  Tensor out(a.cols(), a.rows());
  for (std::int64_t i = 0; i < a.rows(); ++i)
    for (std::int64_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

}  // namespace dm3d
