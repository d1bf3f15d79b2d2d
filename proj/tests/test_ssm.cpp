#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "dm3d/gaussian_deform.hpp"
#include "dm3d/offset_field.hpp"
#include "dm3d/pipeline.hpp"
#include "dm3d/ssm.hpp"
#include "dm3d/tpff.hpp"
#include "doctest.h"
#include "support.hpp"

using dm3d::Tensor;
using std::int64_t;
using testsup::random_tensor;
namespace ad = dm3d::ad;

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}
double phi(double x) {
  return std::abs(x) < 1e-6 ? 1.0 + x / 2.0 + x * x / 6.0 : std::expm1(x) / x;
}
double gelu(double x) {
  return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244));
}
double silu(double x) { return x * sigmoid(x); }

dm3d::SsmBranchParams branch_params(std::uint64_t seed, int64_t c, int64_t s,
                                    int64_t r, int64_t width) {
  dm3d::SsmBranchParams p;
  p.conv_kernel = ad::make_param(random_tensor(seed, "conv_k", width, c, 0.4));
  p.conv_bias = ad::make_param(random_tensor(seed, "conv_b", 1, c, 0.1));
  p.x_proj_w = ad::make_param(random_tensor(seed, "x_proj", r + 2 * s, c, 0.4));
  p.dt_proj_w = ad::make_param(random_tensor(seed, "dt_proj", c, r, 0.4));
  p.dt_bias = ad::make_param(random_tensor(seed, "dt_b", 1, c, 0.2));
  p.a_log = ad::make_param(random_tensor(seed, "a_log", c, s, 0.3));
  p.skip = ad::make_param(random_tensor(seed, "skip", 1, c, 0.5));
  return p;
}

// Straight-line scalar reference for the selective scan, written against the
// recurrence itself rather than the tensor layout.
Tensor scan_reference(const Tensor& u, const dm3d::SsmBranchParams& p) {
  const int64_t l = u.rows(), c = u.cols();
  const int64_t s = p.d_state(), r = p.dt_rank();
  const Tensor& xw = p.x_proj_w.value();
  const Tensor& dw = p.dt_proj_w.value();

  Tensor y(l, c);
  std::vector<double> h(static_cast<std::size_t>(c * s), 0.0);
  for (int64_t t = 0; t < l; ++t) {
    std::vector<double> dt_in(static_cast<std::size_t>(r), 0.0);
    std::vector<double> b_in(static_cast<std::size_t>(s), 0.0);
    std::vector<double> c_in(static_cast<std::size_t>(s), 0.0);
    for (int64_t q = 0; q < r; ++q)
      for (int64_t m = 0; m < c; ++m) dt_in[q] += xw(q, m) * u(t, m);
    for (int64_t q = 0; q < s; ++q)
      for (int64_t m = 0; m < c; ++m) {
        b_in[q] += xw(r + q, m) * u(t, m);
        c_in[q] += xw(r + s + q, m) * u(t, m);
      }
    for (int64_t ch = 0; ch < c; ++ch) {
      double pre = p.dt_bias.value()(0, ch);
      for (int64_t q = 0; q < r; ++q) pre += dw(ch, q) * dt_in[q];
      const double dt = softplus(pre);
      double out = p.skip.value()(0, ch) * u(t, ch);
      for (int64_t q = 0; q < s; ++q) {
        const double a = -std::exp(p.a_log.value()(ch, q));
        const double da = dt * a;
        double& state = h[static_cast<std::size_t>(ch * s + q)];
        state = std::exp(da) * state + dt * phi(da) * b_in[q] * u(t, ch);
        out += c_in[q] * state;
      }
      y(t, ch) = out;
    }
  }
  return y;
}

Tensor conv_act_reference(const Tensor& u, const dm3d::SsmBranchParams& p,
                          int64_t pad_left, dm3d::BranchAct act) {
  const int64_t l = u.rows(), c = u.cols();
  const int64_t w = p.conv_kernel.rows();
  Tensor x(l, c);
  for (int64_t t = 0; t < l; ++t)
    for (int64_t ch = 0; ch < c; ++ch) {
      double acc = p.conv_bias.value()(0, ch);
      for (int64_t k = 0; k < w; ++k) {
        const int64_t src = t + k - pad_left;
        if (src >= 0 && src < l) acc += p.conv_kernel.value()(k, ch) * u(src, ch);
      }
      x(t, ch) = act == dm3d::BranchAct::kSilu ? silu(acc) : gelu(acc);
    }
  return x;
}

}  // namespace

TEST_CASE("zoh discretization pinned values and argument checks") {
  const Tensor a = Tensor::scalar(-1.0);
  const Tensor b = Tensor::scalar(1.0);
  auto [a_bar, b_bar] = dm3d::zoh_discretize(a, b, 0.1);
  CHECK(std::abs(a_bar(0, 0) - 0.9048374180359595) < 1e-12);
  CHECK(std::abs(b_bar(0, 0) - 0.09516258196404043) < 1e-12);

  // As A -> 0- the input matrix collapses to delta * B.
  auto [a2, b2] = dm3d::zoh_discretize(Tensor::scalar(-1e-12), b, 0.1);
  CHECK(std::abs(b2(0, 0) - 0.1) < 1e-12);
  CHECK(a2(0, 0) <= 1.0);

  // Stability: negative A keeps |A_bar| < 1 across magnitudes.
  for (double mag : {1e-6, 1e-3, 0.5, 2.0, 50.0}) {
    auto [ab, bb] = dm3d::zoh_discretize(Tensor::scalar(-mag), b, 0.25);
    CHECK(ab(0, 0) < 1.0);
    CHECK(ab(0, 0) > 0.0);
    CHECK(bb(0, 0) > 0.0);
  }

  CHECK_THROWS_AS(dm3d::zoh_discretize(a, b, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(dm3d::zoh_discretize(a, b, -0.1), std::invalid_argument);
  CHECK_THROWS_AS(dm3d::zoh_discretize(a, Tensor(1, 2), 0.1),
                  std::invalid_argument);
}

TEST_CASE("zoh series/closed-form seam is continuous") {
  // x = delta * A straddles the 1e-6 switch; both branches must agree with
  // expm1(x)/x to high relative accuracy on either side.
  for (double sgn : {1.0, -1.0}) {
    for (double mag : {0.999999e-6, 0.9999999e-6, 1.0000001e-6, 1.000001e-6}) {
      const double x = sgn * mag;
      auto [ab, bb] = dm3d::zoh_discretize(Tensor::scalar(x), Tensor::scalar(1.0), 1.0);
      const double exact = std::expm1(x) / x;
      CHECK(std::abs(bb(0, 0) - exact) / exact < 1e-10);
    }
    // Continuity across the seam itself.
    auto [al, bl] = dm3d::zoh_discretize(Tensor::scalar(sgn * 0.9999999e-6),
                                         Tensor::scalar(1.0), 1.0);
    auto [ar, br] = dm3d::zoh_discretize(Tensor::scalar(sgn * 1.0000001e-6),
                                         Tensor::scalar(1.0), 1.0);
    CHECK(std::abs(bl(0, 0) - br(0, 0)) / std::abs(br(0, 0)) < 1e-10);
  }
}

TEST_CASE("selective_scan zeros, shapes, and hand-unrolled reference") {
  const int64_t l = 5, c = 3, s = 2, r = 1;
  auto params = branch_params(21, c, s, r, 3);

  // Zero input: every input-dependent projection vanishes, so y = 0.
  auto y0 = dm3d::selective_scan(ad::make_constant(Tensor(l, c)), params);
  CHECK(y0.value().max_abs() == 0.0);

  const Tensor u = random_tensor(21, "u", l, c, 0.8);
  auto y = dm3d::selective_scan(ad::make_constant(u), params);
  const Tensor ref = scan_reference(u, params);
  CHECK(Tensor::max_abs_diff(y.value(), ref) < 1e-12);
  CHECK(y.value().max_abs() < 1e6);

  // Length-1 sequences exercise the h_0 = 0 initial condition alone.
  const Tensor u1 = random_tensor(22, "u1", 1, c, 0.8);
  auto y1 = dm3d::selective_scan(ad::make_constant(u1), params);
  CHECK(Tensor::max_abs_diff(y1.value(), scan_reference(u1, params)) < 1e-12);

  CHECK_THROWS_AS(dm3d::selective_scan(ad::Var(), params),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      dm3d::selective_scan(ad::make_constant(Tensor(l, c + 1)), params),
      std::invalid_argument);
}

TEST_CASE("ssm_branch composes conv, activation, and scan") {
  const int64_t l = 6, c = 4, s = 3, r = 2;
  const Tensor u = random_tensor(23, "u", l, c, 0.7);

  auto causal = branch_params(23, c, s, r, 4);
  auto got = dm3d::ssm_branch(ad::make_constant(u), causal, 3,
                              dm3d::BranchAct::kSilu);
  Tensor ref = scan_reference(
      conv_act_reference(u, causal, 3, dm3d::BranchAct::kSilu), causal);
  CHECK(Tensor::max_abs_diff(got.value(), ref) < 1e-12);

  auto centered = branch_params(24, c, s, r, 3);
  auto got2 = dm3d::ssm_branch(ad::make_constant(u), centered, 1,
                               dm3d::BranchAct::kGelu);
  Tensor ref2 = scan_reference(
      conv_act_reference(u, centered, 1, dm3d::BranchAct::kGelu), centered);
  CHECK(Tensor::max_abs_diff(got2.value(), ref2) < 1e-12);
}

TEST_CASE("layer_norm matches scalar math and fixes constant rows") {
  dm3d::LayerNormParams p;
  p.gain = ad::make_param(random_tensor(25, "gain", 1, 3, 0.5));
  p.bias = ad::make_param(random_tensor(25, "bias", 1, 3, 0.5));

  const Tensor x = random_tensor(25, "x", 2, 3);
  auto y = dm3d::layer_norm(ad::make_constant(x), p);
  for (int64_t i = 0; i < 2; ++i) {
    double mean = 0, var = 0;
    for (int64_t j = 0; j < 3; ++j) mean += x(i, j) / 3.0;
    for (int64_t j = 0; j < 3; ++j)
      var += (x(i, j) - mean) * (x(i, j) - mean) / 3.0;
    for (int64_t j = 0; j < 3; ++j) {
      const double want = p.gain.value()(0, j) * (x(i, j) - mean) /
                              std::sqrt(var + 1e-5) +
                          p.bias.value()(0, j);
      CHECK(y.value()(i, j) == doctest::Approx(want).epsilon(1e-12));
    }
  }

  // A constant row has zero variance; the output collapses to the bias.
  auto yc = dm3d::layer_norm(ad::make_constant(Tensor::full(1, 3, 4.2)), p);
  CHECK(Tensor::max_abs_diff(yc.value(), p.bias.value()) < 1e-12);
}

TEST_CASE("dmb_forward matches a composition of its public pieces") {
  dm3d::ModelConfig cfg = dm3d::ModelConfig::toy();
  dm3d::ModelParams mp = dm3d::init_model_params(cfg, 77);
  dm3d::DmbParams& p = mp.stages[0].dmb;
  const dm3d::DmbConfig dcfg = cfg.dmb_config();

  const int64_t n = cfg.n_groups, d = cfg.feat_dim;
  const Tensor centers = random_tensor(27, "centers", n, 3, 0.4);
  const std::vector<int64_t> base{3, 1, 4, 0, 7, 5, 2, 6};
  const Tensor xv = random_tensor(27, "tokens", n + 1, d, 0.6);

  ad::NoGradGuard ng;
  ad::Var x = ad::make_constant(xv);
  auto res = dm3d::dmb_forward(x, centers, base, dcfg, p);

  // Rebuild the block from its public pieces, step by step.
  ad::Var xz = ad::matmul(x, ad::transpose(p.in_proj_w));
  ad::Var y_fwd = dm3d::ssm_branch(xz, p.fwd, p.fwd.conv_kernel.rows() - 1,
                                   dm3d::BranchAct::kSilu);
  ad::Var y_chan = ad::reverse_cols(
      dm3d::ssm_branch(ad::reverse_cols(xz), p.chan,
                       p.chan.conv_kernel.rows() - 1, dm3d::BranchAct::kSilu));
  ad::Var cls = ad::slice_rows(x, 0, 1);
  ad::Var feats = ad::slice_rows(x, 1, n + 1);
  auto ctx = dm3d::lcfa(feats, centers, dcfg.radius, dcfg.k_q, p.lcfa);
  auto field = dm3d::offset_net(ctx.aggregated, p.offset);

  Tensor s_probe = field.delta_t.value();
  for (int64_t i = 0; i < n; ++i)
    s_probe(i, 0) += static_cast<double>(base[static_cast<std::size_t>(i)]);
  REQUIRE(dm3d::equidistant_rows(s_probe).empty());

  auto rs = dm3d::gkr(feats, centers, field.delta_p, dcfg.k_r, p.sigma_s);
  ad::Var resampled = ad::add(rs.resampled, feats);
  auto w = dm3d::gdr_weights(base, field.delta_t, p.sigma_t);
  ad::Var reordered = dm3d::gdr_apply(w, resampled);
  ad::Var deformed = ad::concat_rows({cls, reordered});
  ad::Var u_def = dm3d::linear(deformed, p.dlinear_w, p.dlinear_b);
  ad::Var y_def = dm3d::ssm_branch(
      u_def, p.def, (p.def.conv_kernel.rows() - 1) / 2, dm3d::BranchAct::kGelu);
  ad::Var fused = dm3d::tpff({y_fwd, y_chan, y_def}, p.tpff);
  ad::Var gate = ad::sigmoid_(dm3d::linear(x, p.gate_w, p.gate_b));
  ad::Var out = ad::matmul(ad::mul(fused, gate), ad::transpose(p.out_w));

  CHECK(Tensor::max_abs_diff(res.y_fwd.value(), y_fwd.value()) < 1e-12);
  CHECK(Tensor::max_abs_diff(res.y_chan.value(), y_chan.value()) < 1e-12);
  CHECK(Tensor::max_abs_diff(res.y_def.value(), y_def.value()) < 1e-12);
  CHECK(Tensor::max_abs_diff(res.out.value(), out.value()) < 1e-12);
  CHECK(Tensor::max_abs_diff(res.new_centers, rs.new_coords.value()) == 0.0);
  CHECK(res.new_order == dm3d::hard_sort_order(w.shifted_index));

  // Wrong token count is rejected.
  CHECK_THROWS_AS(dm3d::dmb_forward(feats, centers, base, dcfg, p),
                  std::invalid_argument);
}

TEST_CASE("deformable branch degenerates to a plain scan in serial order") {
  dm3d::ModelConfig cfg = dm3d::ModelConfig::toy();
  cfg.k_r = 1;  // single resampling neighbor: the kernel is exactly identity
  dm3d::ModelParams mp = dm3d::init_model_params(cfg, 99);
  dm3d::DmbParams& p = mp.stages[0].dmb;

  // Pin the offsets to zero and make the reorder sharply peaked.
  p.offset.out_w.set_value(Tensor(p.offset.out_w.rows(), p.offset.out_w.cols()));
  p.offset.out_b.set_value(Tensor(1, 4));
  p.sigma_t.set_value(Tensor::scalar(0.05));

  const int64_t n = cfg.n_groups, d = cfg.feat_dim;
  const Tensor centers = random_tensor(31, "centers", n, 3, 0.4);
  std::vector<int64_t> base(static_cast<std::size_t>(n));
  for (int64_t i = 0; i < n; ++i) base[static_cast<std::size_t>(i)] = i;
  const Tensor xv = random_tensor(31, "tokens", n + 1, d, 0.6);

  ad::NoGradGuard ng;
  ad::Var x = ad::make_constant(xv);
  auto res = dm3d::dmb_forward(x, centers, base, cfg.dmb_config(), p);
  CHECK(res.delta_p.max_abs() == 0.0);
  CHECK(res.delta_t.max_abs() == 0.0);
  for (int64_t i = 0; i < n; ++i) CHECK(res.new_order[static_cast<std::size_t>(i)] == i);

  // Reference: tokens pass straight through with the residual doubling the
  // features, then the centered-conv GELU branch.
  Tensor doubled(n + 1, d);
  for (int64_t j = 0; j < d; ++j) doubled(0, j) = xv(0, j);
  for (int64_t i = 1; i <= n; ++i)
    for (int64_t j = 0; j < d; ++j) doubled(i, j) = 2.0 * xv(i, j);
  ad::Var u_def = dm3d::linear(ad::make_constant(doubled), p.dlinear_w, p.dlinear_b);
  ad::Var want = dm3d::ssm_branch(
      u_def, p.def, (p.def.conv_kernel.rows() - 1) / 2, dm3d::BranchAct::kGelu);
  CHECK(Tensor::max_abs_diff(res.y_def.value(), want.value()) < 1e-5);
}

TEST_CASE("dmb_forward handles a single token plus class token") {
  dm3d::ModelConfig cfg = dm3d::ModelConfig::toy();
  cfg.n_groups = 1;
  cfg.group_size = 1;
  cfg.k_q = 1;
  cfg.k_r = 1;
  dm3d::ModelParams mp = dm3d::init_model_params(cfg, 55);

  const Tensor centers = random_tensor(33, "c", 1, 3);
  const Tensor xv = random_tensor(33, "x", 2, cfg.feat_dim, 0.5);
  ad::NoGradGuard ng;
  auto res = dm3d::dmb_forward(ad::make_constant(xv), centers, {0},
                               cfg.dmb_config(), mp.stages[0].dmb);
  CHECK(res.out.rows() == 2);
  CHECK(res.out.cols() == cfg.feat_dim);
  CHECK(res.out.value().all_finite());
  CHECK(res.new_order == std::vector<int64_t>{0});

  // A 1x1 reorder matrix can only be [1].
  auto w = dm3d::gdr_weights({0}, Tensor(1, 1), 0.05);
  CHECK(w.matrix.value()(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("stage_forward is the identity when the block is silenced") {
  dm3d::ModelConfig cfg = dm3d::ModelConfig::toy();
  dm3d::ModelParams mp = dm3d::init_model_params(cfg, 11);
  dm3d::StageParams& stage = mp.stages[0];
  stage.dmb.out_w.set_value(
      Tensor(stage.dmb.out_w.rows(), stage.dmb.out_w.cols()));

  const int64_t n = cfg.n_groups;
  const Tensor centers = random_tensor(35, "centers", n, 3, 0.4);
  std::vector<int64_t> base(static_cast<std::size_t>(n));
  for (int64_t i = 0; i < n; ++i) base[static_cast<std::size_t>(i)] = i;
  const Tensor xv = random_tensor(35, "x", n + 1, cfg.feat_dim, 0.6);

  ad::NoGradGuard ng;
  ad::Var x = ad::make_constant(xv);

  // No local-enhancement plugged: out = 0 + x' and x' = x.
  auto res = dm3d::stage_forward(x, centers, base, cfg.dmb_config(), stage);
  CHECK(Tensor::max_abs_diff(res.out.value(), xv) == 0.0);

  // Identity enhancement plugged: x' = LN1(x) + x.
  auto res2 = dm3d::stage_forward(x, centers, base, cfg.dmb_config(), stage,
                                  [](const ad::Var& v) { return v; });
  ad::Var want = ad::add(dm3d::layer_norm(x, stage.ln1), x);
  CHECK(Tensor::max_abs_diff(res2.out.value(), want.value()) < 1e-12);
}

TEST_CASE("model_forward keeps shapes across stages and is deterministic") {
  dm3d::ModelConfig cfg = dm3d::ModelConfig::toy();
  cfg.n_stages = 3;
  const int64_t pts = 48;

  dm3d::PointCloud cloud;
  cloud.coords = random_tensor(41, "cloud", pts, 3);
  dm3d::ModelParams params = dm3d::init_model_params(cfg, 13);

  ad::NoGradGuard ng;
  auto out1 = dm3d::model_forward(cloud, cfg, params);
  CHECK(out1.tokens.rows() == cfg.n_groups + 1);
  CHECK(out1.tokens.cols() == cfg.feat_dim);
  CHECK(out1.centers.rows() == cfg.n_groups);
  CHECK(out1.diags.size() == 3);
  CHECK(out1.tokens.value().all_finite());
  for (const auto& diag : out1.diags) {
    std::vector<int64_t> sorted = diag.new_order;
    std::sort(sorted.begin(), sorted.end());
    for (int64_t i = 0; i < cfg.n_groups; ++i)
      CHECK(sorted[static_cast<std::size_t>(i)] == i);
  }

  auto out2 = dm3d::model_forward(cloud, cfg, params);
  CHECK(Tensor::max_abs_diff(out1.tokens.value(), out2.tokens.value()) == 0.0);
}
