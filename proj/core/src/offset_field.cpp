#include "dm3d/offset_field.hpp"

#include <stdexcept>

#include "dm3d/geometry.hpp"

namespace dm3d {

namespace ad_ns = dm3d::ad;

ad_ns::Var linear(const ad_ns::Var& x, const ad_ns::Var& w, const ad_ns::Var& b) {
  ad_ns::Var y = ad_ns::matmul(x, ad_ns::transpose(w));
  return b.valid() ? ad_ns::add(y, b) : y;
}

void LcfaParams::visit(
    const std::string& prefix,
    const std::function<void(const std::string&, ad_ns::Var&)>& f) {
  f(prefix + ".weight", weight);
  f(prefix + ".bias", bias);
}

NeighborhoodContext lcfa(const ad_ns::Var& features, const Tensor& centers,
                         double radius, std::int64_t k_q,
                         const LcfaParams& params,
                         const std::vector<std::int64_t>& batch) {
  const std::int64_t n = centers.rows();
  if (features.rows() != n)
    throw std::invalid_argument("lcfa: token/center count mismatch");
  const std::int64_t d = features.cols();
  if (params.weight.rows() != d || params.weight.cols() != 2 * d)
    throw std::invalid_argument("lcfa: weight must be D x 2D");

  NeighborhoodContext out;
  out.k_q = k_q;
  out.neighbors = ball_query(centers, centers, radius, k_q, batch, batch);

  std::vector<std::int64_t> expand(out.neighbors.size());
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t k = 0; k < k_q; ++k) expand[i * k_q + k] = i;

  ad_ns::Var neighbor_feats = ad_ns::gather_rows(features, out.neighbors);
  ad_ns::Var center_expanded = ad_ns::gather_rows(features, expand);
  ad_ns::Var cat = ad_ns::concat_cols({center_expanded, neighbor_feats});
  ad_ns::Var weights = linear(cat, params.weight, params.bias);
  out.context =
      ad_ns::segment_sum_rows(ad_ns::mul(weights, neighbor_feats), k_q);
  out.aggregated = ad_ns::concat_cols({features, out.context});
  return out;
}

void OffsetNetParams::visit(
    const std::string& prefix,
    const std::function<void(const std::string&, ad_ns::Var&)>& f) {
  f(prefix + ".dw_kernel", dw_kernel);
  f(prefix + ".dw_bias", dw_bias);
  f(prefix + ".reduce_w", reduce_w);
  f(prefix + ".reduce_b", reduce_b);
  f(prefix + ".se_w1", se_w1);
  f(prefix + ".se_b1", se_b1);
  f(prefix + ".se_w2", se_w2);
  f(prefix + ".se_b2", se_b2);
  f(prefix + ".out_w", out_w);
  f(prefix + ".out_b", out_b);
}

OffsetField offset_net(const ad_ns::Var& aggregated,
                       const OffsetNetParams& params) {
  const std::int64_t width = params.dw_kernel.rows();
  if (width % 2 == 0)
    throw std::invalid_argument("offset_net: depthwise kernel width must be odd");
  if (params.dw_kernel.cols() != aggregated.cols())
    throw std::invalid_argument("offset_net: kernel channels must match input");

  ad_ns::Var x = ad_ns::conv1d_depthwise(aggregated, params.dw_kernel,
                                         params.dw_bias, (width - 1) / 2);
  x = linear(x, params.reduce_w, params.reduce_b);

  // Squeeze-excitation: pool over the sequence, gate per channel.
  ad_ns::Var z = ad_ns::col_mean(x);
  ad_ns::Var gate = ad_ns::sigmoid_(linear(
      ad_ns::relu_(linear(z, params.se_w1, params.se_b1)), params.se_w2,
      params.se_b2));
  x = ad_ns::mul(x, gate);

  x = ad_ns::relu_(x);
  ad_ns::Var o = ad_ns::tanh_(linear(x, params.out_w, params.out_b));
  if (params.scale != 1.0) o = ad_ns::scale(o, params.scale);

  OffsetField field;
  field.scale = params.scale;
  field.delta_p = ad_ns::slice_cols(o, 0, 3);
  field.delta_t = ad_ns::slice_cols(o, 3, 4);
  return field;
}

}  // namespace dm3d
