#include "dm3d/embedding.hpp"

#include <algorithm>
#include <stdexcept>

#include "dm3d/offset_field.hpp"

namespace dm3d {

namespace ad_ns = dm3d::ad;

void EmbedConfig::validate() const {
  if (n_groups < 1 || group_size < 1 || feat_dim < 1)
    throw std::invalid_argument("EmbedConfig: N, K, D must be positive");
  if (hilbert_order < 1 || hilbert_order > 16)
    throw std::invalid_argument("EmbedConfig: hilbert_order out of range");
}

void EmbedParams::visit(
    const std::string& prefix,
    const std::function<void(const std::string&, ad_ns::Var&)>& f) {
  f(prefix + ".stats_w1", stats_w1);
  f(prefix + ".stats_b1", stats_b1);
  f(prefix + ".stats_w2", stats_w2);
  f(prefix + ".stats_b2", stats_b2);
  f(prefix + ".pos_w1", pos_w1);
  f(prefix + ".pos_b1", pos_b1);
  f(prefix + ".pos_w2", pos_w2);
  f(prefix + ".pos_b2", pos_b2);
  f(prefix + ".cls", cls);
}

namespace {

ad_ns::Var two_layer(const ad_ns::Var& x, const ad_ns::Var& w1,
                     const ad_ns::Var& b1, const ad_ns::Var& w2,
                     const ad_ns::Var& b2) {
  return linear(ad_ns::tanh_(linear(x, w1, b1)), w2, b2);
}

bool coord_less(const Tensor& pts, std::int64_t a, std::int64_t b) {
  for (std::int64_t c = 0; c < 3; ++c) {
    if (pts(a, c) < pts(b, c)) return true;
    if (pts(a, c) > pts(b, c)) return false;
  }
  return a < b;
}

}  // namespace

EmbedResult embed(const PointCloud& cloud, const EmbedConfig& cfg,
                  const EmbedParams& params, std::int64_t batch) {
  cfg.validate();
  cloud.validate();

  // Extract this batch's points (the model consumes one sequence per batch).
  std::vector<std::int64_t> to_source;
  for (std::int64_t i = 0; i < cloud.size(); ++i)
    if (cloud.batch_of(i) == batch) to_source.push_back(i);
  const auto p = static_cast<std::int64_t>(to_source.size());
  if (p < cfg.n_groups)
    throw std::invalid_argument("embed: batch smaller than requested N");
  if (p < cfg.group_size)
    throw std::invalid_argument("embed: batch smaller than group size K");
  Tensor pts(p, 3);
  for (std::int64_t i = 0; i < p; ++i)
    for (std::int64_t c = 0; c < 3; ++c)
      pts(i, c) = cloud.coords(to_source[static_cast<std::size_t>(i)], c);

  // Permutation-stable FPS seed: lexicographically smallest point.
  std::int64_t start = 0;
  for (std::int64_t i = 1; i < p; ++i)
    if (coord_less(pts, i, start)) start = i;

  const auto picks = farthest_point_sample(pts, cfg.n_groups, start);
  const std::int64_t n = cfg.n_groups, k = cfg.group_size;
  Tensor centers(n, 3);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t c = 0; c < 3; ++c)
      centers(i, c) = pts(picks[static_cast<std::size_t>(i)], c);

  auto groups = knn(centers, pts, k);
  // Contract: each group leads with its own center. KNN already puts the
  // zero-distance self match first unless duplicates tie below its index.
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t self = picks[static_cast<std::size_t>(i)];
    auto* row = groups.data() + i * k;
    auto* found = std::find(row, row + k, self);
    if (found == row + k) {
      row[0] = self;
    } else {
      std::rotate(row, found, found + 1);
    }
  }

  // Per-group centered statistics over coordinate-sorted members, so the
  // exact floating-point sums do not depend on input point order.
  Tensor stats(n, 6);
  std::vector<std::int64_t> members(static_cast<std::size_t>(k));
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < k; ++j)
      members[static_cast<std::size_t>(j)] = groups[i * k + j];
    std::sort(members.begin(), members.end(),
              [&](std::int64_t a, std::int64_t b) { return coord_less(pts, a, b); });
    for (std::int64_t c = 0; c < 3; ++c) {
      double mean = 0.0, mx = -1e300;
      for (std::int64_t j = 0; j < k; ++j) {
        const double d = pts(members[static_cast<std::size_t>(j)], c) - centers(i, c);
        mean += d;
        mx = std::max(mx, d);
      }
      stats(i, c) = mean / static_cast<double>(k);
      stats(i, 3 + c) = mx;
    }
  }

  // Serialize while everything is still constant, then embed in final order.
  EmbedResult res;
  res.order = serialize(centers, bbox_config(centers, cfg.hilbert_order));
  Tensor sorted_centers(n, 3), sorted_stats(n, 6);
  std::vector<std::int64_t> sorted_groups(static_cast<std::size_t>(n * k));
  for (std::int64_t r = 0; r < n; ++r) {
    const std::int64_t src = res.order.perm[static_cast<std::size_t>(r)];
    for (std::int64_t c = 0; c < 3; ++c) sorted_centers(r, c) = centers(src, c);
    for (std::int64_t c = 0; c < 6; ++c) sorted_stats(r, c) = stats(src, c);
    for (std::int64_t j = 0; j < k; ++j)
      sorted_groups[static_cast<std::size_t>(r * k + j)] =
          to_source[static_cast<std::size_t>(groups[src * k + j])];
  }

  res.centers = sorted_centers;
  res.base_index.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) res.base_index[static_cast<std::size_t>(i)] = i;

  res.grouped.centers = sorted_centers;
  res.grouped.group_indices = std::move(sorted_groups);
  res.grouped.k = k;
  res.grouped.validate(cloud.size());

  ad_ns::Var geo = two_layer(ad_ns::make_constant(sorted_stats), params.stats_w1,
                             params.stats_b1, params.stats_w2, params.stats_b2);
  ad_ns::Var pos = two_layer(ad_ns::make_constant(sorted_centers), params.pos_w1,
                             params.pos_b1, params.pos_w2, params.pos_b2);
  ad_ns::Var feats = ad_ns::add(geo, pos);
  res.grouped.features = feats.value();
  res.tokens = ad_ns::concat_rows({params.cls, feats});
  return res;
}

}  // namespace dm3d
