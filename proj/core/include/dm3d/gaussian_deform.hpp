#pragma once

#include <cstdint>
#include <vector>

#include "dm3d/autodiff.hpp"
#include "dm3d/tensor.hpp"

namespace dm3d {

/// Stabilizer used by every normalized Gaussian weighting in this module.
inline constexpr double kGaussEps = 1e-8;

/// exp(-d^2 / (2 sigma^2)); symmetric in d, equals 1 iff d = 0.
double gaussian_weight(double d, double sigma);

/// Gaussian-based KNN resampling: offsets each token's center by delta_p,
/// gathers k_r nearest original centers (batch-masked), and interpolates
/// neighbor features with stabilized normalized Gaussian weights. The
/// residual connection (resampled + original) is applied by the caller.
struct ResampleResult {
  ad::Var new_coords;                    // N x 3 (centers + delta_p)
  ad::Var resampled;                     // N x D
  std::vector<std::int64_t> neighbors;   // N*k_r, row-major neighbor sets
  std::int64_t k_r = 0;
};

ResampleResult gkr(const ad::Var& features, const Tensor& centers,
                   const ad::Var& delta_p, std::int64_t k_r,
                   const ad::Var& sigma_s,
                   const std::vector<std::int64_t>& batch = {});

/// Row-stochastic Gaussian reordering weights over target ranks J = 0..N-1.
struct ReorderWeights {
  ad::Var matrix;         // N x N, rows sum to 1 after stabilization
  Tensor shifted_index;   // N x 1 snapshot of s = base_index + delta_t
  Tensor target_index;    // 1 x N, the ranks J
  double sigma_t = 0.0;   // scalar snapshot of the scale used
};

ReorderWeights gdr_weights(const std::vector<std::int64_t>& base_index,
                           const ad::Var& delta_t, const ad::Var& sigma_t);

/// Convenience overload for non-differentiable callers.
ReorderWeights gdr_weights(const std::vector<std::int64_t>& base_index,
                           const Tensor& delta_t, double sigma_t);

/// Row-stochastic mix: output row i is sum_j W_ij * features[j].
ad::Var gdr_apply(const ReorderWeights& weights, const ad::Var& features);

/// Closed-form dW_ij/ds_i = W_ij / sigma^2 * (J_j - sum_l W_il J_l).
Tensor gdr_weight_grad(const ReorderWeights& weights);

/// Hard sort of the shifted indices: position r of the result names the row
/// whose s value has rank r (ties by row). This is the sigma_t -> 0 limit.
std::vector<std::int64_t> hard_sort_order(const Tensor& shifted_index);

/// Rows whose shifted index is (within tol) exactly midway between two
/// integers — the diverging-case configurations.
std::vector<std::int64_t> equidistant_rows(const Tensor& shifted_index,
                                           double tol = 1e-9);

/// Limit diagnostics across a sigma grid, for the demo CLI and acceptance
/// suite: uniform deviation (pooling limit), permutation deviation (sorting
/// limit), tie rows with their split weights, max analytic gradient.
struct GdrLimitEntry {
  double sigma = 0.0;
  double max_uniform_dev = 0.0;
  double max_permutation_dev = 0.0;
  double max_grad = 0.0;
  std::vector<std::int64_t> tie_rows;
  std::vector<double> tie_split_weights;  // two entries per tie row
};

std::vector<GdrLimitEntry> gdr_limit_report(
    const std::vector<std::int64_t>& base_index, const Tensor& delta_t,
    const std::vector<double>& sigmas);

}  // namespace dm3d
