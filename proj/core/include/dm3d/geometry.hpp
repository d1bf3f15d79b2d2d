#pragma once

#include <cstdint>
#include <vector>

#include "dm3d/tensor.hpp"

namespace dm3d {

/// Raw point set with an optional batch partition. batch_id values must form
/// a contiguous range starting at 0; the default constructor-free path gives
/// every point batch 0.
struct PointCloud {
  Tensor coords;                      // P x 3
  std::vector<std::int64_t> batch_id; // empty means all zero

  std::int64_t size() const { return coords.rows(); }
  std::int64_t batch_of(std::int64_t i) const {
    return batch_id.empty() ? 0 : batch_id[i];
  }
  void validate() const;
};

/// N local groups over a source cloud: per-group center coordinates, member
/// indices (k per group, first one the center's own index), and whatever
/// feature matrix the embedder attached.
struct GroupedCloud {
  Tensor centers;                           // N x 3
  std::vector<std::int64_t> group_indices;  // N*k, row-major
  Tensor features;                          // N x D (may be empty pre-embed)
  std::int64_t k = 0;

  std::int64_t groups() const { return centers.rows(); }
  void validate(std::int64_t source_size) const;
};

/// FPS result of n distinct indices. Each successive pick maximizes the
/// minimum distance to the already-selected set; ties go to the lowest index.
std::vector<std::int64_t> farthest_point_sample(const Tensor& points,
                                                std::int64_t n,
                                                std::int64_t start = 0);

/// k nearest reference indices per query, ascending distance, ties broken by
/// lower index. When batch labels are given, candidates from other batches
/// are excluded; empty label vectors mean a single shared batch.
std::vector<std::int64_t> knn(const Tensor& queries, const Tensor& reference,
                              std::int64_t k,
                              const std::vector<std::int64_t>& query_batch = {},
                              const std::vector<std::int64_t>& ref_batch = {});

/// Up to k_max indices per center with distance <= radius, nearest first.
/// Under-full neighborhoods repeat the first qualifying index; if nothing is
/// in range the center's nearest in-batch point pads instead.
std::vector<std::int64_t> ball_query(const Tensor& centers, const Tensor& cloud,
                                     double radius, std::int64_t k_max,
                                     const std::vector<std::int64_t>& center_batch = {},
                                     const std::vector<std::int64_t>& cloud_batch = {});

/// Squared Euclidean distance between row a of xs and row b of ys.
double squared_distance(const Tensor& xs, std::int64_t a, const Tensor& ys,
                        std::int64_t b);

}  // namespace dm3d
