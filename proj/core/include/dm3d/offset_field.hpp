#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dm3d/autodiff.hpp"
#include "dm3d/tensor.hpp"

namespace dm3d {

/// Pointwise weight map of the local-context aggregation: maps the
/// [expanded-center | neighbor] concatenation (2D channels) to per-neighbor,
/// per-channel aggregation weights (D channels). Linear on purpose — the
/// zero-weight and constant-one contracts depend on it.
struct LcfaParams {
  ad::Var weight;  // D x 2D
  ad::Var bias;    // 1 x D

  void visit(const std::string& prefix,
             const std::function<void(const std::string&, ad::Var&)>& f);
};

struct NeighborhoodContext {
  ad::Var context;                      // N x D, weighted neighbor sum
  ad::Var aggregated;                   // N x 2D, [feats | context]
  std::vector<std::int64_t> neighbors;  // N*k_q neighbor indices
  std::int64_t k_q = 0;
};

NeighborhoodContext lcfa(const ad::Var& features, const Tensor& centers,
                         double radius, std::int64_t k_q,
                         const LcfaParams& params,
                         const std::vector<std::int64_t>& batch = {});

/// Offset head: depthwise conv along the sequence (width 5, symmetric
/// padding) -> pointwise reduction 2D -> D/2 -> squeeze-excitation channel
/// gate -> ReLU -> pointwise projection to 4 -> tanh -> * scale. The first
/// three output channels are the spatial offset, the last the sequential one.
struct OffsetNetParams {
  ad::Var dw_kernel;  // W x 2D (W odd)
  ad::Var dw_bias;    // 1 x 2D
  ad::Var reduce_w;   // (D/2) x 2D
  ad::Var reduce_b;   // 1 x (D/2)
  ad::Var se_w1;      // H x (D/2), H = max(1, D/8)
  ad::Var se_b1;      // 1 x H
  ad::Var se_w2;      // (D/2) x H
  ad::Var se_b2;      // 1 x (D/2)
  ad::Var out_w;      // 4 x (D/2)
  ad::Var out_b;      // 1 x 4
  double scale = 1.0;

  void visit(const std::string& prefix,
             const std::function<void(const std::string&, ad::Var&)>& f);
};

struct OffsetField {
  ad::Var delta_p;  // N x 3, each entry strictly inside (-scale, scale)
  ad::Var delta_t;  // N x 1
  double scale = 1.0;
};

OffsetField offset_net(const ad::Var& aggregated, const OffsetNetParams& params);

/// x * W^T + b — the pointwise map used throughout the parameterized blocks.
ad::Var linear(const ad::Var& x, const ad::Var& w, const ad::Var& b);

}  // namespace dm3d
