#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "dm3d/embedding.hpp"
#include "dm3d/ssm.hpp"

namespace dm3d {

/// Every knob of the desk-scale pipeline, defaulted to the reference
/// configuration (N=128, K=32, D=384, T=6, d_state=16, K_q=8, K_r=3,
/// sigma_s=1, sigma_t=0.2, offset kernel 5).
struct ModelConfig {
  std::int64_t n_groups = 128;
  std::int64_t group_size = 32;
  std::int64_t feat_dim = 384;
  std::int64_t n_stages = 6;
  std::int64_t d_state = 16;
  std::int64_t k_q = 8;
  std::int64_t k_r = 3;
  double radius = 0.1;
  int hilbert_order = 9;
  std::int64_t offset_kernel = 5;
  double dp_scale = 1.0;
  double sigma_s_init = 1.0;
  double sigma_t_init = 0.2;

  std::int64_t d_inner() const { return 2 * feat_dim; }
  std::int64_t dt_rank() const { return (feat_dim + 15) / 16; }
  std::int64_t tpff_groups() const { return d_inner() < 32 ? d_inner() : 32; }

  EmbedConfig embed_config() const;
  DmbConfig dmb_config() const;
  void validate() const;

  /// N=8, K=4, D=8, 1 stage, d_state=4 — the finite-difference-sized setup.
  static ModelConfig toy();
};

struct ModelParams {
  EmbedParams embed;
  std::vector<StageParams> stages;

  void visit(const std::function<void(const std::string&, ad::Var&)>& f);
};

/// Deterministic per-array initialization: each array draws from its own
/// stream seeded by (seed, array name), so adding or reordering arrays never
/// shifts another array's values.
ModelParams init_model_params(const ModelConfig& cfg, std::uint64_t seed);

/// Named views over every parameter array, in visit order.
std::vector<std::pair<std::string, ad::Var*>> named_params(ModelParams& params);

struct StageDiag {
  std::vector<std::int64_t> new_order;
  double delta_p_norm = 0.0;
  double delta_t_norm = 0.0;
  double y_fwd_norm = 0.0;
  double y_chan_norm = 0.0;
  double y_def_norm = 0.0;
};

struct ModelOutput {
  ad::Var tokens;                        // (N+1) x D after all stages
  Tensor centers;                        // N x 3, serialized order
  std::vector<std::int64_t> base_index;  // identity after serialization
  std::vector<StageDiag> diags;          // one per stage
};

ModelOutput model_forward(const PointCloud& cloud, const ModelConfig& cfg,
                          ModelParams& params, const GfcpFn& gfcp = nullptr);

}  // namespace dm3d
