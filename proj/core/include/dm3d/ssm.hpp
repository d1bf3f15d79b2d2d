#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "dm3d/autodiff.hpp"
#include "dm3d/offset_field.hpp"
#include "dm3d/tensor.hpp"
#include "dm3d/tpff.hpp"

namespace dm3d {

/// Elementwise zero-order-hold discretization of a diagonal system:
/// a_bar = exp(delta * a), b_bar = delta * phi(delta * a) * b where
/// phi(x) = (e^x - 1) / x with a series fallback below |x| = 1e-6.
std::pair<Tensor, Tensor> zoh_discretize(const Tensor& a, const Tensor& b,
                                         double delta);

/// One branch of the selective scan: short depthwise conv -> nonlinearity ->
/// input-dependent (delta, B, C) -> recurrence with skip.
struct SsmBranchParams {
  ad::Var conv_kernel;  // W x d_inner
  ad::Var conv_bias;    // 1 x d_inner
  ad::Var x_proj_w;     // (dt_rank + 2 d_state) x d_inner, no bias
  ad::Var dt_proj_w;    // d_inner x dt_rank
  ad::Var dt_bias;      // 1 x d_inner
  ad::Var a_log;        // d_inner x d_state; A = -exp(a_log)
  ad::Var skip;         // 1 x d_inner

  std::int64_t d_state() const { return a_log.cols(); }
  std::int64_t dt_rank() const { return dt_proj_w.cols(); }

  void visit(const std::string& prefix,
             const std::function<void(const std::string&, ad::Var&)>& f);
};

/// The scan itself (after the branch's conv + nonlinearity):
/// y_t = C_t h_t + skip * u_t with h_t = A_bar_t h_{t-1} + B_bar_t u_t.
ad::Var selective_scan(const ad::Var& u, const SsmBranchParams& params);

enum class BranchAct { kSilu, kGelu };

/// conv (depthwise, given left padding) -> activation -> selective_scan.
ad::Var ssm_branch(const ad::Var& u, const SsmBranchParams& params,
                   std::int64_t pad_left, BranchAct act);

struct LayerNormParams {
  ad::Var gain;  // 1 x D
  ad::Var bias;  // 1 x D

  void visit(const std::string& prefix,
             const std::function<void(const std::string&, ad::Var&)>& f);
};

/// Per-row mean/variance normalization with learned gain and bias.
ad::Var layer_norm(const ad::Var& x, const LayerNormParams& params,
                   double eps = 1e-5);

/// Geometry knobs of the deformable branch.
struct DmbConfig {
  double radius = 0.1;
  std::int64_t k_q = 8;
  std::int64_t k_r = 3;
};

struct DmbParams {
  ad::Var in_proj_w;  // d_inner x D
  SsmBranchParams fwd;     // width-4 causal conv
  SsmBranchParams chan;    // width-4 causal conv, on flipped channels
  // Deformable branch
  LcfaParams lcfa;
  OffsetNetParams offset;
  ad::Var sigma_s;    // 1 x 1, learnable resampling scale
  ad::Var sigma_t;    // 1 x 1, learnable reordering scale
  ad::Var dlinear_w;  // d_inner x D
  ad::Var dlinear_b;  // 1 x d_inner
  SsmBranchParams def;     // width-3 symmetric conv
  TpffParams tpff;
  ad::Var gate_w;     // d_inner x D
  ad::Var gate_b;     // 1 x d_inner
  ad::Var out_w;      // D x d_inner

  void visit(const std::string& prefix,
             const std::function<void(const std::string&, ad::Var&)>& f);
};

struct DmbResult {
  ad::Var out;          // (N+1) x D
  ad::Var y_fwd;        // branch outputs before fusion, (N+1) x d_inner
  ad::Var y_chan;
  ad::Var y_def;
  Tensor new_centers;   // N x 3, deformed positions (diagnostic)
  std::vector<std::int64_t> new_order;  // rank -> token row (diagnostic)
  Tensor delta_p;       // N x 3 snapshot
  Tensor delta_t;       // N x 1 snapshot
};

/// The three-branch block. x carries the class token at row 0; centers and
/// base_index describe the N geometric tokens below it. The class token
/// bypasses the deformation and is re-prepended before the deformable scan.
DmbResult dmb_forward(const ad::Var& x, const Tensor& centers,
                      const std::vector<std::int64_t>& base_index,
                      const DmbConfig& cfg, const DmbParams& params);

using GfcpFn = std::function<ad::Var(const ad::Var&)>;

struct StageParams {
  LayerNormParams ln1;
  LayerNormParams ln2;
  DmbParams dmb;

  void visit(const std::string& prefix,
             const std::function<void(const std::string&, ad::Var&)>& f);
};

struct StageResult {
  ad::Var out;
  DmbResult dmb;
};

/// x' = GFCP(LN1(x)) + x;  out = DMB(LN2(x')) + x'. GFCP is a pluggable
/// local-enhancement stage; when nothing is plugged the enhancement term
/// drops out and x' = x.
StageResult stage_forward(const ad::Var& x, const Tensor& centers,
                          const std::vector<std::int64_t>& base_index,
                          const DmbConfig& cfg, const StageParams& params,
                          const GfcpFn& gfcp = nullptr);

}  // namespace dm3d
