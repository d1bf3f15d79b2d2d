#include "dm3d/pipeline.hpp"

#include <cmath>
#include <stdexcept>

#include "dm3d/rng.hpp"

namespace dm3d {

namespace ad_ns = dm3d::ad;

EmbedConfig ModelConfig::embed_config() const {
  EmbedConfig e;
  e.n_groups = n_groups;
  e.group_size = group_size;
  e.feat_dim = feat_dim;
  e.hilbert_order = hilbert_order;
  return e;
}

DmbConfig ModelConfig::dmb_config() const {
  DmbConfig d;
  d.radius = radius;
  d.k_q = k_q;
  d.k_r = k_r;
  return d;
}

void ModelConfig::validate() const {
  embed_config().validate();
  if (n_stages < 1) throw std::invalid_argument("ModelConfig: n_stages < 1");
  if (d_state < 1) throw std::invalid_argument("ModelConfig: d_state < 1");
  if (k_q < 1 || k_r < 1)
    throw std::invalid_argument("ModelConfig: neighbor counts must be positive");
  if (radius <= 0.0) throw std::invalid_argument("ModelConfig: radius <= 0");
  if (offset_kernel < 1 || offset_kernel % 2 == 0)
    throw std::invalid_argument("ModelConfig: offset kernel must be odd");
  if (sigma_s_init <= 0.0 || sigma_t_init <= 0.0)
    throw std::invalid_argument("ModelConfig: sigma inits must be positive");
  if (feat_dim % 2 != 0)
    throw std::invalid_argument("ModelConfig: feat_dim must be even");
  if (d_inner() % tpff_groups() != 0)
    throw std::invalid_argument("ModelConfig: fusion groups must divide d_inner");
}

ModelConfig ModelConfig::toy() {
  ModelConfig c;
  c.n_groups = 8;
  c.group_size = 4;
  c.feat_dim = 8;
  c.n_stages = 1;
  c.d_state = 4;
  c.k_q = 4;
  c.k_r = 2;
  c.radius = 0.5;
  c.hilbert_order = 4;
  return c;
}

void ModelParams::visit(
    const std::function<void(const std::string&, ad_ns::Var&)>& f) {
  embed.visit("embed", f);
  for (std::size_t i = 0; i < stages.size(); ++i)
    stages[i].visit("stage" + std::to_string(i), f);
}

namespace {

ad_ns::Var draw_normal(std::uint64_t seed, const std::string& name,
                       std::int64_t rows, std::int64_t cols, double sd) {
  SplitMix64 rng(named_seed(seed, name));
  Tensor t(rows, cols);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * sd;
  return ad_ns::make_param(std::move(t));
}

ad_ns::Var fan_in_weight(std::uint64_t seed, const std::string& name,
                         std::int64_t rows, std::int64_t cols) {
  return draw_normal(seed, name, rows, cols,
                     1.0 / std::sqrt(static_cast<double>(cols)));
}

ad_ns::Var const_param(std::int64_t rows, std::int64_t cols, double value) {
  return ad_ns::make_param(Tensor::full(rows, cols, value));
}

SsmBranchParams init_branch(const ModelConfig& cfg, std::uint64_t seed,
                            const std::string& prefix, std::int64_t conv_width,
                            bool log_spaced_a) {
  const std::int64_t c = cfg.d_inner(), s = cfg.d_state, r = cfg.dt_rank();
  SsmBranchParams p;
  p.conv_kernel = draw_normal(seed, prefix + ".conv_kernel", conv_width, c,
                              1.0 / std::sqrt(static_cast<double>(conv_width)));
  p.conv_bias = const_param(1, c, 0.0);
  p.x_proj_w = fan_in_weight(seed, prefix + ".x_proj_w", r + 2 * s, c);
  p.dt_proj_w = fan_in_weight(seed, prefix + ".dt_proj_w", c, r);
  // softplus(dt_bias) ~ 0.05, a conventional small step at init.
  p.dt_bias = const_param(1, c, std::log(std::expm1(0.05)));
  Tensor a_log(c, s);
  for (std::int64_t i = 0; i < c; ++i)
    for (std::int64_t j = 0; j < s; ++j) {
      // F/C branches: A = -(1..S). Deformable branch: A = -linspace(0.5, 2).
      const double mag =
          log_spaced_a
              ? 0.5 + (s == 1 ? 0.0 : 1.5 * static_cast<double>(j) /
                                          static_cast<double>(s - 1))
              : static_cast<double>(j + 1);
      a_log(i, j) = std::log(mag);
    }
  p.a_log = ad_ns::make_param(std::move(a_log));
  p.skip = const_param(1, c, 1.0);
  return p;
}

LayerNormParams init_layer_norm(std::int64_t d) {
  LayerNormParams p;
  p.gain = const_param(1, d, 1.0);
  p.bias = const_param(1, d, 0.0);
  return p;
}

DmbParams init_dmb(const ModelConfig& cfg, std::uint64_t seed,
                   const std::string& prefix) {
  const std::int64_t d = cfg.feat_dim, c = cfg.d_inner(), h = d / 2;
  const std::int64_t se_h = std::max<std::int64_t>(1, h / 4);
  DmbParams p;
  p.in_proj_w = fan_in_weight(seed, prefix + ".in_proj_w", c, d);
  p.fwd = init_branch(cfg, seed, prefix + ".fwd", 4, false);
  p.chan = init_branch(cfg, seed, prefix + ".chan", 4, false);

  p.lcfa.weight = fan_in_weight(seed, prefix + ".lcfa.weight", d, 2 * d);
  p.lcfa.bias = const_param(1, d, 0.0);

  p.offset.dw_kernel =
      draw_normal(seed, prefix + ".offset.dw_kernel", cfg.offset_kernel, 2 * d,
                  1.0 / std::sqrt(static_cast<double>(cfg.offset_kernel)));
  p.offset.dw_bias = const_param(1, 2 * d, 0.0);
  p.offset.reduce_w = fan_in_weight(seed, prefix + ".offset.reduce_w", h, 2 * d);
  p.offset.reduce_b = const_param(1, h, 0.0);
  p.offset.se_w1 = fan_in_weight(seed, prefix + ".offset.se_w1", se_h, h);
  p.offset.se_b1 = const_param(1, se_h, 0.0);
  p.offset.se_w2 = fan_in_weight(seed, prefix + ".offset.se_w2", h, se_h);
  p.offset.se_b2 = const_param(1, h, 0.0);
  p.offset.out_w = fan_in_weight(seed, prefix + ".offset.out_w", 4, h);
  p.offset.out_b = const_param(1, 4, 0.0);
  p.offset.scale = cfg.dp_scale;

  p.sigma_s = const_param(1, 1, cfg.sigma_s_init);
  p.sigma_t = const_param(1, 1, cfg.sigma_t_init);
  p.dlinear_w = fan_in_weight(seed, prefix + ".dlinear_w", c, d);
  p.dlinear_b = const_param(1, c, 0.0);
  p.def = init_branch(cfg, seed, prefix + ".def", 3, true);

  const std::int64_t g = cfg.tpff_groups();
  p.tpff.groups = g;
  p.tpff.fuse_w = fan_in_weight(seed, prefix + ".tpff.fuse_w", c, 3 * c / g);
  p.tpff.freq_w = fan_in_weight(seed, prefix + ".tpff.freq_w", 2 * c, 2 * c / g);
  p.tpff.freq_b = const_param(1, 2 * c, 0.0);

  p.gate_w = fan_in_weight(seed, prefix + ".gate_w", c, d);
  p.gate_b = const_param(1, c, 0.0);
  p.out_w = fan_in_weight(seed, prefix + ".out_w", d, c);
  return p;
}

}  // namespace

ModelParams init_model_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::int64_t d = cfg.feat_dim;
  ModelParams p;
  p.embed.stats_w1 = fan_in_weight(seed, "embed.stats_w1", d, 6);
  p.embed.stats_b1 = const_param(1, d, 0.0);
  p.embed.stats_w2 = fan_in_weight(seed, "embed.stats_w2", d, d);
  p.embed.stats_b2 = const_param(1, d, 0.0);
  p.embed.pos_w1 = fan_in_weight(seed, "embed.pos_w1", d, 3);
  p.embed.pos_b1 = const_param(1, d, 0.0);
  p.embed.pos_w2 = fan_in_weight(seed, "embed.pos_w2", d, d);
  p.embed.pos_b2 = const_param(1, d, 0.0);
  p.embed.cls = const_param(1, d, 0.0);

  p.stages.reserve(static_cast<std::size_t>(cfg.n_stages));
  for (std::int64_t i = 0; i < cfg.n_stages; ++i) {
    StageParams s;
    const std::string prefix = "stage" + std::to_string(i);
    s.ln1 = init_layer_norm(d);
    s.ln2 = init_layer_norm(d);
    s.dmb = init_dmb(cfg, seed, prefix + ".dmb");
    p.stages.push_back(std::move(s));
  }
  return p;
}

std::vector<std::pair<std::string, ad_ns::Var*>> named_params(
    ModelParams& params) {
  std::vector<std::pair<std::string, ad_ns::Var*>> out;
  params.visit([&](const std::string& name, ad_ns::Var& v) {
    out.emplace_back(name, &v);
  });
  return out;
}

ModelOutput model_forward(const PointCloud& cloud, const ModelConfig& cfg,
                          ModelParams& params, const GfcpFn& gfcp) {
  cfg.validate();
  EmbedResult er = embed(cloud, cfg.embed_config(), params.embed);

  ModelOutput out;
  out.centers = er.centers;
  out.base_index = er.base_index;
  out.tokens = er.tokens;

  const DmbConfig dcfg = cfg.dmb_config();
  for (auto& stage : params.stages) {
    StageResult sr =
        stage_forward(out.tokens, out.centers, out.base_index, dcfg, stage, gfcp);
    StageDiag diag;
    diag.new_order = sr.dmb.new_order;
    diag.delta_p_norm = sr.dmb.delta_p.frobenius_norm();
    diag.delta_t_norm = sr.dmb.delta_t.frobenius_norm();
    diag.y_fwd_norm = sr.dmb.y_fwd.value().frobenius_norm();
    diag.y_chan_norm = sr.dmb.y_chan.value().frobenius_norm();
    diag.y_def_norm = sr.dmb.y_def.value().frobenius_norm();
    out.diags.push_back(std::move(diag));
    out.tokens = sr.out;
  }
  return out;
}

}  // namespace dm3d
