#include "dm3d/ssm.hpp"

#include <cmath>
#include <stdexcept>

#include "dm3d/gaussian_deform.hpp"

namespace dm3d {

namespace ad_ns = dm3d::ad;

std::pair<Tensor, Tensor> zoh_discretize(const Tensor& a, const Tensor& b,
                                         double delta) {
  if (delta <= 0.0)
    throw std::invalid_argument("zoh_discretize: delta must be > 0");
  if (!a.same_shape(b))
    throw std::invalid_argument("zoh_discretize: A/B shape mismatch");
  Tensor a_bar(a.rows(), a.cols()), b_bar(a.rows(), a.cols());
  for (std::int64_t i = 0; i < a.size(); ++i) {
    const double x = delta * a[i];
    a_bar[i] = std::exp(x);
    const double phi =
        std::abs(x) < 1e-6 ? 1.0 + x / 2.0 + x * x / 6.0 : std::expm1(x) / x;
    b_bar[i] = delta * phi * b[i];
  }
  return {std::move(a_bar), std::move(b_bar)};
}

void SsmBranchParams::visit(
    const std::string& prefix,
    const std::function<void(const std::string&, ad_ns::Var&)>& f) {
  f(prefix + ".conv_kernel", conv_kernel);
  f(prefix + ".conv_bias", conv_bias);
  f(prefix + ".x_proj_w", x_proj_w);
  f(prefix + ".dt_proj_w", dt_proj_w);
  f(prefix + ".dt_bias", dt_bias);
  f(prefix + ".a_log", a_log);
  f(prefix + ".skip", skip);
}

ad_ns::Var selective_scan(const ad_ns::Var& u, const SsmBranchParams& params) {
  if (!u.valid())
    throw std::invalid_argument("selective_scan: invalid input variable");
  if (u.rows() == 0)
    throw std::invalid_argument("selective_scan: empty sequence");
  const std::int64_t c = u.cols();
  const std::int64_t s = params.d_state();
  const std::int64_t r = params.dt_rank();
  if (params.x_proj_w.cols() != c || params.x_proj_w.rows() != r + 2 * s ||
      params.a_log.rows() != c || params.dt_proj_w.rows() != c)
    throw std::invalid_argument("selective_scan: parameter shape mismatch");

  // Input-dependent (delta, B, C).
  ad_ns::Var xdbl = ad_ns::matmul(u, ad_ns::transpose(params.x_proj_w));
  ad_ns::Var dt_in = ad_ns::slice_cols(xdbl, 0, r);
  ad_ns::Var b_in = ad_ns::slice_cols(xdbl, r, r + s);
  ad_ns::Var c_in = ad_ns::slice_cols(xdbl, r + s, r + 2 * s);
  ad_ns::Var dt = ad_ns::softplus_(ad_ns::add(
      ad_ns::matmul(dt_in, ad_ns::transpose(params.dt_proj_w)), params.dt_bias));

  // Discretize: a_bar = exp(dt*A); b_bar = dt * phi(dt*A) * B_t.
  ad_ns::Var a = ad_ns::neg(ad_ns::exp_(params.a_log));  // C x S, negative
  ad_ns::Var da = ad_ns::mul_outer_cols(dt, a);          // L x (C*S)
  ad_ns::Var a_bar = ad_ns::exp_(da);
  ad_ns::Var dt_exp = ad_ns::repeat_cols_interleaved(dt, s);
  ad_ns::Var b_tile = ad_ns::tile_cols(b_in, c);
  ad_ns::Var b_bar = ad_ns::mul(ad_ns::mul(dt_exp, ad_ns::zoh_phi(da)), b_tile);
  ad_ns::Var b_u = ad_ns::mul(b_bar, ad_ns::repeat_cols_interleaved(u, s));

  ad_ns::Var y = ad_ns::scan_recurrence(a_bar, b_u, c_in, c);
  return ad_ns::add(y, ad_ns::mul(u, params.skip));
}

ad_ns::Var ssm_branch(const ad_ns::Var& u, const SsmBranchParams& params,
                      std::int64_t pad_left, BranchAct act) {
  ad_ns::Var x =
      ad_ns::conv1d_depthwise(u, params.conv_kernel, params.conv_bias, pad_left);
  x = act == BranchAct::kSilu ? ad_ns::silu_(x) : ad_ns::gelu_(x);
  return selective_scan(x, params);
}

void LayerNormParams::visit(
    const std::string& prefix,
    const std::function<void(const std::string&, ad_ns::Var&)>& f) {
  f(prefix + ".gain", gain);
  f(prefix + ".bias", bias);
}

ad_ns::Var layer_norm(const ad_ns::Var& x, const LayerNormParams& params,
                      double eps) {
  const double inv_d = 1.0 / static_cast<double>(x.cols());
  ad_ns::Var mean = ad_ns::scale(ad_ns::row_sum(x), inv_d);
  ad_ns::Var centered = ad_ns::sub(x, mean);
  ad_ns::Var var =
      ad_ns::scale(ad_ns::row_sum(ad_ns::mul(centered, centered)), inv_d);
  ad_ns::Var normed =
      ad_ns::divide(centered, ad_ns::sqrt_(ad_ns::add_scalar(var, eps)));
  return ad_ns::add(ad_ns::mul(normed, params.gain), params.bias);
}

void DmbParams::visit(
    const std::string& prefix,
    const std::function<void(const std::string&, ad_ns::Var&)>& f) {
  f(prefix + ".in_proj_w", in_proj_w);
  fwd.visit(prefix + ".fwd", f);
  chan.visit(prefix + ".chan", f);
  lcfa.visit(prefix + ".lcfa", f);
  offset.visit(prefix + ".offset", f);
  f(prefix + ".sigma_s", sigma_s);
  f(prefix + ".sigma_t", sigma_t);
  f(prefix + ".dlinear_w", dlinear_w);
  f(prefix + ".dlinear_b", dlinear_b);
  def.visit(prefix + ".def", f);
  tpff.visit(prefix + ".tpff", f);
  f(prefix + ".gate_w", gate_w);
  f(prefix + ".gate_b", gate_b);
  f(prefix + ".out_w", out_w);
}

DmbResult dmb_forward(const ad_ns::Var& x, const Tensor& centers,
                      const std::vector<std::int64_t>& base_index,
                      const DmbConfig& cfg, const DmbParams& params) {
  const std::int64_t n = centers.rows();
  if (x.rows() != n + 1)
    throw std::invalid_argument(
        "dmb_forward: token count must be center count + 1 (class token)");
  if (static_cast<std::int64_t>(base_index.size()) != n)
    throw std::invalid_argument("dmb_forward: base_index size mismatch");

  ad_ns::Var xz = ad_ns::matmul(x, ad_ns::transpose(params.in_proj_w));

  DmbResult res;
  res.y_fwd = ssm_branch(xz, params.fwd, params.fwd.conv_kernel.rows() - 1,
                         BranchAct::kSilu);
  res.y_chan = ad_ns::reverse_cols(
      ssm_branch(ad_ns::reverse_cols(xz), params.chan,
                 params.chan.conv_kernel.rows() - 1, BranchAct::kSilu));

  // Deformable branch: offsets -> resample -> residual -> reorder, with the
  // class token stripped and re-prepended.
  ad_ns::Var cls = ad_ns::slice_rows(x, 0, 1);
  ad_ns::Var feats = ad_ns::slice_rows(x, 1, n + 1);

  NeighborhoodContext ctx =
      lcfa(feats, centers, cfg.radius, cfg.k_q, params.lcfa);
  OffsetField field = offset_net(ctx.aggregated, params.offset);
  res.delta_p = field.delta_p.value();

  // Exact midpoint shifts make the reordering weights non-differentiable;
  // nudge only those rows, as a constant, so gradients stay untouched.
  {
    Tensor s_probe = field.delta_t.value();
    for (std::int64_t i = 0; i < n; ++i)
      s_probe(i, 0) += static_cast<double>(base_index[static_cast<std::size_t>(i)]);
    const auto ties = equidistant_rows(s_probe);
    if (!ties.empty()) {
      Tensor jitter(n, 1);
      for (std::int64_t row : ties) jitter(row, 0) = 1e-6;
      field.delta_t = ad_ns::add(field.delta_t, ad_ns::make_constant(jitter));
    }
  }
  res.delta_t = field.delta_t.value();

  ResampleResult rs =
      gkr(feats, centers, field.delta_p, cfg.k_r, params.sigma_s);
  res.new_centers = rs.new_coords.value();
  ad_ns::Var resampled = ad_ns::add(rs.resampled, feats);

  ReorderWeights w = gdr_weights(base_index, field.delta_t, params.sigma_t);
  res.new_order = hard_sort_order(w.shifted_index);
  ad_ns::Var reordered = gdr_apply(w, resampled);

  ad_ns::Var deformed = ad_ns::concat_rows({cls, reordered});
  ad_ns::Var u_def = linear(deformed, params.dlinear_w, params.dlinear_b);
  res.y_def = ssm_branch(u_def, params.def,
                         (params.def.conv_kernel.rows() - 1) / 2,
                         BranchAct::kGelu);

  ad_ns::Var fused =
      tpff({res.y_fwd, res.y_chan, res.y_def}, params.tpff);
  ad_ns::Var gate = ad_ns::sigmoid_(linear(x, params.gate_w, params.gate_b));
  res.out = ad_ns::matmul(ad_ns::mul(fused, gate),
                          ad_ns::transpose(params.out_w));
  return res;
}

void StageParams::visit(
    const std::string& prefix,
    const std::function<void(const std::string&, ad_ns::Var&)>& f) {
  ln1.visit(prefix + ".ln1", f);
  ln2.visit(prefix + ".ln2", f);
  dmb.visit(prefix + ".dmb", f);
}

StageResult stage_forward(const ad_ns::Var& x, const Tensor& centers,
                          const std::vector<std::int64_t>& base_index,
                          const DmbConfig& cfg, const StageParams& params,
                          const GfcpFn& gfcp) {
  // The local-enhancement slot is pluggable; with nothing plugged the stage
  // reduces to the block residual alone, so x' = x exactly.
  ad_ns::Var x_prime =
      gfcp ? ad_ns::add(gfcp(layer_norm(x, params.ln1)), x) : x;

  StageResult res;
  res.dmb = dmb_forward(layer_norm(x_prime, params.ln2), centers, base_index,
                        cfg, params.dmb);
  res.out = ad_ns::add(res.dmb.out, x_prime);
  return res;
}

}  // namespace dm3d
