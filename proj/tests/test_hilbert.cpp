#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <set>
#include <stdexcept>
#include <vector>

#include "dm3d/hilbert.hpp"
#include "doctest.h"
#include "support.hpp"

using dm3d::Tensor;
using std::int64_t;
using testsup::random_uniform;

namespace {

double adjacent_pair_mean_dist(const Tensor& pts,
                               const std::vector<int64_t>& order) {
  double total = 0;
  for (std::size_t r = 1; r < order.size(); ++r) {
    double s = 0;
    for (int64_t c = 0; c < 3; ++c) {
      const double d = pts(order[r], c) - pts(order[r - 1], c);
      s += d * d;
    }
    total += std::sqrt(s);
  }
  return total / static_cast<double>(order.size() - 1);
}

}  // namespace

TEST_CASE("encode basics and bounds") {
  CHECK(dm3d::hilbert_encode(0, 0, 0, 1) == 0);
  // Bad structure (order) is invalid_argument; bad values are out_of_range.
  CHECK_THROWS_AS(dm3d::hilbert_encode(2, 0, 0, 1), std::out_of_range);
  CHECK_THROWS_AS(dm3d::hilbert_encode(0, 0, 0, 0), std::invalid_argument);
  CHECK_THROWS_AS(dm3d::hilbert_encode(0, 0, 0, 17), std::invalid_argument);

  // Order 1: the 8 cells map onto a permutation of 0..7.
  std::set<std::uint64_t> keys;
  for (std::uint32_t x = 0; x < 2; ++x)
    for (std::uint32_t y = 0; y < 2; ++y)
      for (std::uint32_t z = 0; z < 2; ++z)
        keys.insert(dm3d::hilbert_encode(x, y, z, 1));
  CHECK(keys.size() == 8);
  CHECK(*keys.begin() == 0);
  CHECK(*keys.rbegin() == 7);
}

TEST_CASE("encode/decode round-trip is a bijection at orders 1..3") {
  for (int order = 1; order <= 3; ++order) {
    const std::uint32_t side = 1u << order;
    std::set<std::uint64_t> seen;
    for (std::uint32_t x = 0; x < side; ++x)
      for (std::uint32_t y = 0; y < side; ++y)
        for (std::uint32_t z = 0; z < side; ++z) {
          const std::uint64_t key = dm3d::hilbert_encode(x, y, z, order);
          CHECK(key < (1ull << (3 * order)));
          seen.insert(key);
          const auto cell = dm3d::hilbert_decode(key, order);
          CHECK(cell[0] == x);
          CHECK(cell[1] == y);
          CHECK(cell[2] == z);
        }
    CHECK(seen.size() == static_cast<std::size_t>(side) * side * side);
  }
}

TEST_CASE("consecutive curve indices are grid-adjacent at order 2") {
  const std::uint64_t cells = 64;
  auto prev = dm3d::hilbert_decode(0, 2);
  for (std::uint64_t key = 1; key < cells; ++key) {
    const auto cur = dm3d::hilbert_decode(key, 2);
    int64_t manhattan = 0;
    for (int c = 0; c < 3; ++c)
      manhattan += std::abs(static_cast<int64_t>(cur[c]) -
                            static_cast<int64_t>(prev[c]));
    CHECK(manhattan == 1);  // one unit step along exactly one axis
    prev = cur;
  }
}

TEST_CASE("config validation") {
  dm3d::HilbertConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.order = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.order = 17;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("serialize basics") {
  Tensor one = Tensor::of(1, 3, {0.3, 0.4, 0.5});
  auto s = dm3d::serialize(one, dm3d::bbox_config(one));
  CHECK(s.perm == std::vector<int64_t>{0});
  CHECK(s.base_index == std::vector<int64_t>{0});

  // Input already in curve order keeps the identity permutation.
  Tensor pts = random_uniform(3, "sorted", 16, 3);
  auto cfg = dm3d::bbox_config(pts);
  auto first = dm3d::serialize(pts, cfg);
  Tensor ordered(16, 3);
  for (int64_t r = 0; r < 16; ++r)
    for (int64_t c = 0; c < 3; ++c) ordered(r, c) = pts(first.perm[r], c);
  auto second = dm3d::serialize(ordered, cfg);
  std::vector<int64_t> identity(16);
  std::iota(identity.begin(), identity.end(), 0);
  CHECK(second.perm == identity);
}

TEST_CASE("serialize on 128 random centers matches an independent sort") {
  Tensor pts = random_uniform(17, "centers", 128, 3);
  auto cfg = dm3d::bbox_config(pts);
  auto s = dm3d::serialize(pts, cfg);

  // base_index is a permutation of 0..127 with base_index[perm[r]] = r.
  std::vector<int64_t> sorted_idx = s.base_index;
  std::sort(sorted_idx.begin(), sorted_idx.end());
  std::vector<int64_t> identity(128);
  std::iota(identity.begin(), identity.end(), 0);
  CHECK(sorted_idx == identity);
  for (int64_t r = 0; r < 128; ++r) CHECK(s.base_index[s.perm[r]] == r);

  // Sorting by the raw curve keys (stable in the original index) must give
  // the same permutation.
  auto keys = dm3d::hilbert_keys(pts, cfg);
  std::vector<int64_t> oracle(128);
  std::iota(oracle.begin(), oracle.end(), 0);
  std::sort(oracle.begin(), oracle.end(), [&](int64_t a, int64_t b) {
    return keys[a] != keys[b] ? keys[a] < keys[b] : a < b;
  });
  CHECK(s.perm == oracle);
}

TEST_CASE("serialize is scale- and translation-invariant with a recomputed bbox") {
  Tensor pts = random_uniform(23, "inv", 64, 3);
  auto base = dm3d::serialize(pts, dm3d::bbox_config(pts));

  Tensor moved = pts;
  for (int64_t i = 0; i < moved.size(); ++i) moved[i] = moved[i] * 3.5 + 12.0;
  auto transformed = dm3d::serialize(moved, dm3d::bbox_config(moved));
  CHECK(base.perm == transformed.perm);
  CHECK(base.base_index == transformed.base_index);
}

TEST_CASE("hilbert order improves sequence locality on random clouds") {
  int improved = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Tensor pts = random_uniform(seed, "locality", 128, 3);
    auto s = dm3d::serialize(pts, dm3d::bbox_config(pts));
    std::vector<int64_t> raw(128);
    std::iota(raw.begin(), raw.end(), 0);
    if (adjacent_pair_mean_dist(pts, s.perm) <
        adjacent_pair_mean_dist(pts, raw))
      ++improved;
  }
  CHECK(improved >= 18);
}
