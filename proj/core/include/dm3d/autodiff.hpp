#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "dm3d/tensor.hpp"

namespace dm3d::ad {

/// Minimal define-by-run reverse-mode tape over dm3d::Tensor, scoped to the
/// operations this pipeline needs. Values are computed eagerly; when grad
/// mode is off (NoGradGuard), nodes keep no parents or backward closures, so
/// intermediates are freed as soon as the last Var handle drops.
struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backprop;  // accumulates into parents' grads

  void accumulate(const Tensor& g);
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool valid() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  std::int64_t rows() const { return node_->value.rows(); }
  std::int64_t cols() const { return node_->value.cols(); }

  /// Replace a leaf's value in place (used by FD loops and parameter loads).
  void set_value(Tensor v);
  void clear_grad() { node_->grad = Tensor(); }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

/// RAII guard that disables recording within its scope.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

/// Leaf that participates in gradients.
Var make_param(Tensor value);
/// Leaf excluded from gradients.
Var make_constant(Tensor value);

/// Reverse pass from a 1x1 loss. Accumulates into .grad of every reachable
/// node with requires_grad; call clear_grad on leaves between passes.
void backward(const Var& loss);

// ---- elementwise (with {dim == other dim or dim == 1} broadcasting) ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var divide(const Var& a, const Var& b);

Var neg(const Var& a);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);

// ---- unary maps ----
Var exp_(const Var& a);
Var sqrt_(const Var& a);
Var tanh_(const Var& a);
Var sigmoid_(const Var& a);
Var relu_(const Var& a);
Var gelu_(const Var& a);
Var silu_(const Var& a);
Var softplus_(const Var& a);
/// max(x, floor); gradient passes only where x > floor (the stabilized
/// normalization denominators).
Var clamp_min_(const Var& a, double floor);
/// phi(x) = (exp(x) - 1) / x with the documented series fallback near 0;
/// the zero-order-hold input factor.
Var zoh_phi(const Var& a);

// ---- reductions / structure ----
Var sum_all(const Var& a);                    // 1x1
Var row_sum(const Var& a);                    // n x 1
Var col_sum(const Var& a);                    // 1 x m
Var col_mean(const Var& a);                   // 1 x m
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_cols(const Var& a, std::int64_t c0, std::int64_t c1);
Var slice_rows(const Var& a, std::int64_t r0, std::int64_t r1);
Var gather_rows(const Var& a, std::vector<std::int64_t> idx);
/// (n*k) x d -> n x d, summing each consecutive block of k rows.
Var segment_sum_rows(const Var& a, std::int64_t group);
Var reverse_cols(const Var& a);
Var permute_cols(const Var& a, std::vector<std::int64_t> perm);
/// L x C -> L x (C*k), each column repeated k times consecutively.
Var repeat_cols_interleaved(const Var& a, std::int64_t k);
/// L x S -> L x (k*S), whole column block tiled k times.
Var tile_cols(const Var& a, std::int64_t k);
/// x: L x C, m: C x S -> L x (C*S) with out[t, c*S+s] = x[t,c] * m[c,s].
Var mul_outer_cols(const Var& x, const Var& m);

// ---- neural building blocks ----
/// Per-channel convolution along the row (sequence) axis.
/// out[t,c] = sum_w kernel[w,c] * x[t + w - pad_left, c] (+ bias[c]); zero
/// outside. pad_left = W-1 gives the causal form, (W-1)/2 the symmetric one.
Var conv1d_depthwise(const Var& x, const Var& kernel, const Var& bias,
                     std::int64_t pad_left);
/// 1x1 grouped convolution along channels: x L x Cin, w Cout x (Cin/groups).
/// Pass an invalid Var for bias to omit it.
Var conv1d_grouped_pointwise(const Var& x, const Var& w, const Var& bias,
                             std::int64_t groups);

// ---- frequency domain ----
/// DFT along the row (sequence) axis, per column: L x C -> L x 2C, packed
/// [real | imag].
Var dft_seq(const Var& x);
/// Real part of the inverse DFT: L x 2C packed [real | imag] -> L x C.
Var idft_real(const Var& reim);

// ---- recurrence ----
/// Linear scan with per-step coefficients, all rows viewed as C x S blocks:
///   h_t = a_bar[t] (*) h_{t-1} + b_u[t],   y[t,c] = sum_s h_t[c,s] c_proj[t,s]
/// a_bar, b_u: L x (C*S); c_proj: L x S; result L x C. Throws with the step
/// index if a state goes non-finite.
Var scan_recurrence(const Var& a_bar, const Var& b_u, const Var& c_proj,
                    std::int64_t channels);

}  // namespace dm3d::ad
