#include "dm3d/gaussian_deform.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "dm3d/geometry.hpp"

namespace dm3d {

namespace ad_ns = dm3d::ad;

double gaussian_weight(double d, double sigma) {
  if (sigma <= 0.0)
    throw std::invalid_argument("gaussian_weight: sigma must be > 0");
  return std::exp(-(d * d) / (2.0 * sigma * sigma));
}

namespace {

// Row-stabilized normalized weights from squared distances already divided
// by nothing: logits = -d2 / (2 sigma^2). Subtracting the detached row max
// changes neither values nor gradients (softmax shift invariance) but keeps
// exp() away from underflow at small sigma.
ad_ns::Var normalized_gauss_rows(const ad_ns::Var& d2, const ad_ns::Var& sigma,
                                 std::int64_t group) {
  ad_ns::Var denom2 = ad_ns::scale(ad_ns::mul(sigma, sigma), 2.0);
  ad_ns::Var logits = ad_ns::divide(ad_ns::neg(d2), denom2);

  const Tensor& lv = logits.value();
  const std::int64_t n = lv.rows() / group;
  Tensor shift(lv.rows(), 1);
  for (std::int64_t i = 0; i < n; ++i) {
    double m = lv(i * group, 0);
    for (std::int64_t k = 1; k < group; ++k)
      m = std::max(m, lv(i * group + k, 0));
    for (std::int64_t k = 0; k < group; ++k) shift(i * group + k, 0) = m;
  }
  ad_ns::Var e = ad_ns::exp_(ad_ns::sub(logits, ad_ns::make_constant(shift)));
  ad_ns::Var sums = ad_ns::clamp_min_(ad_ns::segment_sum_rows(e, group), kGaussEps);

  std::vector<std::int64_t> expand(static_cast<std::size_t>(n * group));
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t k = 0; k < group; ++k) expand[i * group + k] = i;
  return ad_ns::divide(e, ad_ns::gather_rows(sums, std::move(expand)));
}

}  // namespace

ResampleResult gkr(const ad_ns::Var& features, const Tensor& centers,
                   const ad_ns::Var& delta_p, std::int64_t k_r,
                   const ad_ns::Var& sigma_s,
                   const std::vector<std::int64_t>& batch) {
  const std::int64_t n = centers.rows();
  if (features.rows() != n || delta_p.rows() != n || delta_p.cols() != 3)
    throw std::invalid_argument("gkr: token/center/offset shape mismatch");
  if (k_r < 1) throw std::invalid_argument("gkr: k_r must be >= 1");

  ResampleResult out;
  out.k_r = k_r;
  out.new_coords = ad_ns::add(ad_ns::make_constant(centers), delta_p);

  // Neighbor selection is discrete: done on the current values, constant to
  // the tape. knn itself enforces the per-batch population precondition.
  out.neighbors = knn(out.new_coords.value(), centers, k_r, batch, batch);

  std::vector<std::int64_t> query_expand(out.neighbors.size());
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t k = 0; k < k_r; ++k) query_expand[i * k_r + k] = i;

  ad_ns::Var q = ad_ns::gather_rows(out.new_coords, query_expand);
  ad_ns::Var nb =
      ad_ns::gather_rows(ad_ns::make_constant(centers), out.neighbors);
  ad_ns::Var diff = ad_ns::sub(q, nb);
  ad_ns::Var d2 = ad_ns::row_sum(ad_ns::mul(diff, diff));  // (N*k_r) x 1

  ad_ns::Var w = normalized_gauss_rows(d2, sigma_s, k_r);
  ad_ns::Var nf = ad_ns::gather_rows(features, out.neighbors);
  out.resampled = ad_ns::segment_sum_rows(ad_ns::mul(w, nf), k_r);
  return out;
}

ReorderWeights gdr_weights(const std::vector<std::int64_t>& base_index,
                           const ad_ns::Var& delta_t, const ad_ns::Var& sigma_t) {
  const auto n = static_cast<std::int64_t>(base_index.size());
  if (delta_t.rows() != n || delta_t.cols() != 1)
    throw std::invalid_argument("gdr_weights: delta_t must be Nx1");
  if (sigma_t.value()(0, 0) <= 0.0)
    throw std::invalid_argument("gdr_weights: sigma_t must be > 0");

  Tensor base(n, 1);
  Tensor targets(1, n);
  for (std::int64_t i = 0; i < n; ++i) {
    base(i, 0) = static_cast<double>(base_index[static_cast<std::size_t>(i)]);
    targets(0, i) = static_cast<double>(i);
  }

  ad_ns::Var s = ad_ns::add(ad_ns::make_constant(base), delta_t);  // N x 1
  ad_ns::Var diff = ad_ns::sub(s, ad_ns::make_constant(targets));  // N x N
  ad_ns::Var d2 = ad_ns::mul(diff, diff);

  ad_ns::Var denom2 = ad_ns::scale(ad_ns::mul(sigma_t, sigma_t), 2.0);
  ad_ns::Var logits = ad_ns::divide(ad_ns::neg(d2), denom2);

  // Same shift-invariant stabilization as the resampler, but row-wise over
  // the dense N x N layout.
  const Tensor& lv = logits.value();
  Tensor shift(n, 1);
  for (std::int64_t i = 0; i < n; ++i) {
    double m = lv(i, 0);
    for (std::int64_t j = 1; j < n; ++j) m = std::max(m, lv(i, j));
    shift(i, 0) = m;
  }
  ad_ns::Var e = ad_ns::exp_(ad_ns::sub(logits, ad_ns::make_constant(shift)));
  ad_ns::Var sums = ad_ns::clamp_min_(ad_ns::row_sum(e), kGaussEps);

  ReorderWeights out;
  out.matrix = ad_ns::divide(e, sums);
  out.shifted_index = s.value();
  out.target_index = targets;
  out.sigma_t = sigma_t.value()(0, 0);
  return out;
}

ReorderWeights gdr_weights(const std::vector<std::int64_t>& base_index,
                           const Tensor& delta_t, double sigma_t) {
  ad_ns::NoGradGuard ng;
  return gdr_weights(base_index, ad_ns::make_constant(delta_t),
                     ad_ns::make_constant(Tensor::full(1, 1, sigma_t)));
}

ad_ns::Var gdr_apply(const ReorderWeights& weights, const ad_ns::Var& features) {
  return ad_ns::matmul(weights.matrix, features);
}

Tensor gdr_weight_grad(const ReorderWeights& weights) {
  const Tensor& w = weights.matrix.value();
  const Tensor& j = weights.target_index;
  const std::int64_t n = w.rows();
  const double inv_s2 = 1.0 / (weights.sigma_t * weights.sigma_t);
  Tensor g(n, n);
  for (std::int64_t i = 0; i < n; ++i) {
    double mean_j = 0.0;
    for (std::int64_t l = 0; l < n; ++l) mean_j += w(i, l) * j(0, l);
    for (std::int64_t c = 0; c < n; ++c)
      g(i, c) = w(i, c) * inv_s2 * (j(0, c) - mean_j);
  }
  return g;
}

std::vector<std::int64_t> hard_sort_order(const Tensor& shifted_index) {
  std::vector<std::int64_t> order(static_cast<std::size_t>(shifted_index.rows()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::int64_t a, std::int64_t b) {
                     return shifted_index(a, 0) < shifted_index(b, 0);
                   });
  return order;
}

std::vector<std::int64_t> equidistant_rows(const Tensor& shifted_index,
                                           double tol) {
  std::vector<std::int64_t> rows;
  for (std::int64_t i = 0; i < shifted_index.rows(); ++i) {
    const double s = shifted_index(i, 0);
    const double frac = s - std::floor(s);
    if (std::abs(frac - 0.5) <= tol) rows.push_back(i);
  }
  return rows;
}

std::vector<GdrLimitEntry> gdr_limit_report(
    const std::vector<std::int64_t>& base_index, const Tensor& delta_t,
    const std::vector<double>& sigmas) {
  if (sigmas.empty())
    throw std::invalid_argument("gdr_limit_report: sigma list empty");
  const auto n = static_cast<std::int64_t>(base_index.size());

  std::vector<GdrLimitEntry> report;
  report.reserve(sigmas.size());
  for (double sigma : sigmas) {
    ReorderWeights w = gdr_weights(base_index, delta_t, sigma);
    const Tensor& m = w.matrix.value();

    GdrLimitEntry entry;
    entry.sigma = sigma;

    const double uniform = 1.0 / static_cast<double>(n);
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < n; ++j)
        entry.max_uniform_dev =
            std::max(entry.max_uniform_dev, std::abs(m(i, j) - uniform));

    // The sigma -> 0 limit concentrates each row on its nearest rank.
    Tensor perm(n, n);
    for (std::int64_t i = 0; i < n; ++i) {
      auto nearest = static_cast<std::int64_t>(std::llround(w.shifted_index(i, 0)));
      nearest = std::clamp<std::int64_t>(nearest, 0, n - 1);
      perm(i, nearest) = 1.0;
    }
    entry.max_permutation_dev = Tensor::max_abs_diff(m, perm);

    entry.max_grad = gdr_weight_grad(w).max_abs();

    entry.tie_rows = equidistant_rows(w.shifted_index);
    for (std::int64_t row : entry.tie_rows) {
      const double s = w.shifted_index(row, 0);
      const auto lo = static_cast<std::int64_t>(std::floor(s));
      const std::int64_t hi = lo + 1;
      entry.tie_split_weights.push_back(
          lo >= 0 && lo < n ? m(row, lo) : 0.0);
      entry.tie_split_weights.push_back(
          hi >= 0 && hi < n ? m(row, hi) : 0.0);
    }
    report.push_back(std::move(entry));
  }
  return report;
}

}  // namespace dm3d
