#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dm3d/autodiff.hpp"
#include "dm3d/geometry.hpp"
#include "dm3d/hilbert.hpp"

namespace dm3d {

struct EmbedConfig {
  std::int64_t n_groups = 128;   // FPS samples N
  std::int64_t group_size = 32;  // KNN group size K
  std::int64_t feat_dim = 384;   // token width D
  int hilbert_order = 9;

  void validate() const;
};

/// Tokenization parameters: a fixed-form statistics embedder standing in for
/// the learned per-group network (documented substitution), the positional
/// map over absolute center coordinates, and the class token.
struct EmbedParams {
  ad::Var stats_w1;  // D x 6
  ad::Var stats_b1;  // 1 x D
  ad::Var stats_w2;  // D x D
  ad::Var stats_b2;  // 1 x D
  ad::Var pos_w1;    // D x 3
  ad::Var pos_b1;    // 1 x D
  ad::Var pos_w2;    // D x D
  ad::Var pos_b2;    // 1 x D
  ad::Var cls;       // 1 x D

  void visit(const std::string& prefix,
             const std::function<void(const std::string&, ad::Var&)>& f);
};

struct EmbedResult {
  ad::Var tokens;                        // (N+1) x D, class token at row 0
  Tensor centers;                        // N x 3, in serialized order
  std::vector<std::int64_t> base_index;  // identity after the sort
  GroupedCloud grouped;                  // groups in serialized order
  SerializedOrder order;                 // over the FPS-order centers
};

/// FPS -> KNN grouping -> per-group centered statistics -> token map ->
/// + positional map -> Hilbert sort -> class token prepended. Operates on a
/// single batch of the cloud (the pipeline runs one sequence per batch); the
/// FPS start is the coordinate-lexicographically smallest point so the
/// result is stable under input permutation.
EmbedResult embed(const PointCloud& cloud, const EmbedConfig& cfg,
                  const EmbedParams& params, std::int64_t batch = 0);

}  // namespace dm3d
