#include "dm3d/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace dm3d {

namespace {

void check_points(const Tensor& pts, const char* who) {
  if (pts.cols() != 3)
    throw std::invalid_argument(std::string(who) + ": expected Px3 coordinates");
}

void check_batch(const Tensor& pts, const std::vector<std::int64_t>& batch,
                 const char* who) {
  if (!batch.empty() && static_cast<std::int64_t>(batch.size()) != pts.rows())
    throw std::invalid_argument(std::string(who) + ": batch label count mismatch");
}

std::int64_t label(const std::vector<std::int64_t>& batch, std::int64_t i) {
  return batch.empty() ? 0 : batch[i];
}

}  // namespace

void PointCloud::validate() const {
  check_points(coords, "PointCloud");
  check_batch(coords, batch_id, "PointCloud");
  if (!coords.all_finite())
    throw std::invalid_argument("PointCloud: non-finite coordinate");
  if (!batch_id.empty()) {
    std::int64_t max_b = 0;
    for (std::int64_t b : batch_id) {
      if (b < 0) throw std::invalid_argument("PointCloud: negative batch id");
      max_b = std::max(max_b, b);
    }
    std::vector<char> seen(static_cast<std::size_t>(max_b) + 1, 0);
    for (std::int64_t b : batch_id) seen[static_cast<std::size_t>(b)] = 1;
    for (char s : seen)
      if (!s)
        throw std::invalid_argument("PointCloud: batch ids not contiguous from 0");
  }
}

void GroupedCloud::validate(std::int64_t source_size) const {
  if (centers.cols() != 3)
    throw std::invalid_argument("GroupedCloud: centers must be Nx3");
  if (k < 1 || static_cast<std::int64_t>(group_indices.size()) != groups() * k)
    throw std::invalid_argument("GroupedCloud: group index count mismatch");
  for (std::int64_t i = 0; i < groups(); ++i)
    for (std::int64_t j = 0; j < k; ++j) {
      const std::int64_t idx = group_indices[static_cast<std::size_t>(i * k + j)];
      if (idx < 0 || idx >= source_size)
        throw std::invalid_argument("GroupedCloud: index out of range");
    }
  if (!features.empty() && features.rows() != groups())
    throw std::invalid_argument("GroupedCloud: feature row count mismatch");
}

double squared_distance(const Tensor& xs, std::int64_t a, const Tensor& ys,
                        std::int64_t b) {
  double acc = 0.0;
  for (std::int64_t c = 0; c < 3; ++c) {
    const double d = xs(a, c) - ys(b, c);
    acc += d * d;
  }
  return acc;
}

std::vector<std::int64_t> farthest_point_sample(const Tensor& points,
                                                std::int64_t n,
                                                std::int64_t start) {
  check_points(points, "farthest_point_sample");
  const std::int64_t p = points.rows();
  if (p == 0) throw std::invalid_argument("farthest_point_sample: empty cloud");
  if (n < 1 || n > p)
    throw std::invalid_argument("farthest_point_sample: n out of range");
  if (start < 0 || start >= p)
    throw std::invalid_argument("farthest_point_sample: start out of range");

  std::vector<std::int64_t> picks;
  picks.reserve(static_cast<std::size_t>(n));
  picks.push_back(start);
  std::vector<double> best(static_cast<std::size_t>(p),
                           std::numeric_limits<double>::infinity());
  for (std::int64_t step = 1; step < n; ++step) {
    const std::int64_t last = picks.back();
    std::int64_t arg = -1;
    double far = -1.0;
    for (std::int64_t i = 0; i < p; ++i) {
      best[i] = std::min(best[i], squared_distance(points, i, points, last));
      if (best[i] > far) {  // strict: ties keep the lowest index
        far = best[i];
        arg = i;
      }
    }
    picks.push_back(arg);
    best[arg] = -1.0;  // never re-pick
  }
  return picks;
}

std::vector<std::int64_t> knn(const Tensor& queries, const Tensor& reference,
                              std::int64_t k,
                              const std::vector<std::int64_t>& query_batch,
                              const std::vector<std::int64_t>& ref_batch) {
  check_points(queries, "knn");
  check_points(reference, "knn");
  check_batch(queries, query_batch, "knn");
  check_batch(reference, ref_batch, "knn");
  if (k < 1) throw std::invalid_argument("knn: k must be positive");

  const std::int64_t q = queries.rows(), p = reference.rows();
  std::vector<std::int64_t> out(static_cast<std::size_t>(q * k));
  std::vector<std::pair<double, std::int64_t>> cand;
  cand.reserve(static_cast<std::size_t>(p));
  for (std::int64_t i = 0; i < q; ++i) {
    cand.clear();
    const std::int64_t b = label(query_batch, i);
    for (std::int64_t j = 0; j < p; ++j)
      if (label(ref_batch, j) == b)
        cand.emplace_back(squared_distance(queries, i, reference, j), j);
    if (static_cast<std::int64_t>(cand.size()) < k)
      throw std::invalid_argument("knn: k exceeds batch population for query " +
                                  std::to_string(i));
    std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
    for (std::int64_t r = 0; r < k; ++r) out[i * k + r] = cand[r].second;
  }
  return out;
}

std::vector<std::int64_t> ball_query(const Tensor& centers, const Tensor& cloud,
                                     double radius, std::int64_t k_max,
                                     const std::vector<std::int64_t>& center_batch,
                                     const std::vector<std::int64_t>& cloud_batch) {
  check_points(centers, "ball_query");
  check_points(cloud, "ball_query");
  check_batch(centers, center_batch, "ball_query");
  check_batch(cloud, cloud_batch, "ball_query");
  if (radius <= 0.0) throw std::invalid_argument("ball_query: radius must be > 0");
  if (k_max < 1) throw std::invalid_argument("ball_query: k_max must be positive");

  const double r2 = radius * radius;
  const std::int64_t q = centers.rows(), p = cloud.rows();
  std::vector<std::int64_t> out(static_cast<std::size_t>(q * k_max));
  std::vector<std::pair<double, std::int64_t>> inside;
  for (std::int64_t i = 0; i < q; ++i) {
    inside.clear();
    const std::int64_t b = label(center_batch, i);
    double near_d = std::numeric_limits<double>::infinity();
    std::int64_t near_j = -1;
    for (std::int64_t j = 0; j < p; ++j) {
      if (label(cloud_batch, j) != b) continue;
      const double d = squared_distance(centers, i, cloud, j);
      if (d < near_d) {
        near_d = d;
        near_j = j;
      }
      if (d <= r2) inside.emplace_back(d, j);
    }
    if (near_j < 0)
      throw std::invalid_argument("ball_query: empty batch for center " +
                                  std::to_string(i));
    std::sort(inside.begin(), inside.end());
    const std::int64_t found =
        std::min<std::int64_t>(k_max, static_cast<std::int64_t>(inside.size()));
    for (std::int64_t r = 0; r < found; ++r) out[i * k_max + r] = inside[r].second;
    const std::int64_t pad = found > 0 ? inside.front().second : near_j;
    for (std::int64_t r = found; r < k_max; ++r) out[i * k_max + r] = pad;
  }
  return out;
}

}  // namespace dm3d
