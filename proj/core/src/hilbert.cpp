#include "dm3d/hilbert.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace dm3d {

namespace {

constexpr int kDims = 3;

void check_order(int order) {
  if (order < 1 || order > 16)
    throw std::invalid_argument("hilbert: order must be in [1, 16]");
}

// Skilling-style conversion between axis coordinates and the transposed
// Hilbert representation (one bit of the key per axis per level).
void axes_to_transpose(std::uint32_t* x, int bits) {
  const std::uint32_t m = 1u << (bits - 1);
  // Inverse undo
  for (std::uint32_t q = m; q > 1; q >>= 1) {
    const std::uint32_t p = q - 1;
    for (int i = 0; i < kDims; ++i) {
      if (x[i] & q) {
        x[0] ^= p;
      } else {
        const std::uint32_t t = (x[0] ^ x[i]) & p;
        x[0] ^= t;
        x[i] ^= t;
      }
    }
  }
  // Gray encode
  for (int i = 1; i < kDims; ++i) x[i] ^= x[i - 1];
  std::uint32_t t = 0;
  for (std::uint32_t q = m; q > 1; q >>= 1)
    if (x[kDims - 1] & q) t ^= q - 1;
  for (int i = 0; i < kDims; ++i) x[i] ^= t;
}

void transpose_to_axes(std::uint32_t* x, int bits) {
  const std::uint32_t n = 2u << (bits - 1);
  // Gray decode
  std::uint32_t t = x[kDims - 1] >> 1;
  for (int i = kDims - 1; i > 0; --i) x[i] ^= x[i - 1];
  x[0] ^= t;
  // Undo excess work
  for (std::uint32_t q = 2; q != n; q <<= 1) {
    const std::uint32_t p = q - 1;
    for (int i = kDims - 1; i >= 0; --i) {
      if (x[i] & q) {
        x[0] ^= p;
      } else {
        t = (x[0] ^ x[i]) & p;
        x[0] ^= t;
        x[i] ^= t;
      }
    }
  }
}

}  // namespace

void HilbertConfig::validate() const {
  check_order(order);
  for (int a = 0; a < 3; ++a)
    if (!(lo[a] <= hi[a]))
      throw std::invalid_argument("HilbertConfig: bbox lo must not exceed hi");
}

std::uint64_t hilbert_encode(std::uint32_t x, std::uint32_t y, std::uint32_t z,
                             int order) {
  check_order(order);
  const std::uint32_t side = 1u << order;
  if (x >= side || y >= side || z >= side)
    throw std::out_of_range("hilbert_encode: cell coordinate out of range");
  std::uint32_t t[kDims] = {x, y, z};
  axes_to_transpose(t, order);
  // Interleave transposed bits, axis 0 most significant within each level.
  std::uint64_t key = 0;
  for (int b = order - 1; b >= 0; --b)
    for (int i = 0; i < kDims; ++i)
      key = (key << 1) | ((t[i] >> b) & 1u);
  return key;
}

std::array<std::uint32_t, 3> hilbert_decode(std::uint64_t key, int order) {
  check_order(order);
  if (order < 16 && key >= (std::uint64_t{1} << (3 * order)))
    throw std::out_of_range("hilbert_decode: key out of range");
  std::uint32_t t[kDims] = {0, 0, 0};
  for (int b = order - 1; b >= 0; --b)
    for (int i = 0; i < kDims; ++i) {
      const int shift = 3 * b + (kDims - 1 - i);
      t[i] |= static_cast<std::uint32_t>((key >> shift) & 1u) << b;
    }
  transpose_to_axes(t, order);
  return {t[0], t[1], t[2]};
}

HilbertConfig bbox_config(const Tensor& centers, int order) {
  if (centers.cols() != 3 || centers.rows() == 0)
    throw std::invalid_argument("bbox_config: expected non-empty Nx3 centers");
  HilbertConfig cfg;
  cfg.order = order;
  for (int a = 0; a < 3; ++a) {
    cfg.lo[a] = centers(0, a);
    cfg.hi[a] = centers(0, a);
  }
  for (std::int64_t i = 1; i < centers.rows(); ++i)
    for (int a = 0; a < 3; ++a) {
      cfg.lo[a] = std::min(cfg.lo[a], centers(i, a));
      cfg.hi[a] = std::max(cfg.hi[a], centers(i, a));
    }
  return cfg;
}

std::vector<std::uint64_t> hilbert_keys(const Tensor& centers,
                                        const HilbertConfig& cfg) {
  cfg.validate();
  if (centers.cols() != 3 || centers.rows() == 0)
    throw std::invalid_argument("hilbert_keys: expected non-empty Nx3 centers");
  const std::uint32_t side = 1u << cfg.order;
  std::array<double, 3> lo = cfg.lo, span{};
  for (int a = 0; a < 3; ++a) {
    span[a] = cfg.hi[a] - lo[a];
    if (span[a] <= 0.0) span[a] = 1e-9;  // degenerate axis widened
  }
  std::vector<std::uint64_t> keys(static_cast<std::size_t>(centers.rows()));
  for (std::int64_t i = 0; i < centers.rows(); ++i) {
    std::uint32_t cell[3];
    for (int a = 0; a < 3; ++a) {
      double u = (centers(i, a) - lo[a]) / span[a];
      auto c = static_cast<std::int64_t>(std::floor(u * side));
      c = std::clamp<std::int64_t>(c, 0, side - 1);
      cell[a] = static_cast<std::uint32_t>(c);
    }
    keys[static_cast<std::size_t>(i)] =
        hilbert_encode(cell[0], cell[1], cell[2], cfg.order);
  }
  return keys;
}

SerializedOrder serialize(const Tensor& centers, const HilbertConfig& cfg) {
  const auto keys = hilbert_keys(centers, cfg);
  const std::int64_t n = centers.rows();
  SerializedOrder out;
  out.perm.resize(static_cast<std::size_t>(n));
  std::iota(out.perm.begin(), out.perm.end(), 0);
  std::sort(out.perm.begin(), out.perm.end(),
            [&](std::int64_t a, std::int64_t b) {
              const auto ka = keys[static_cast<std::size_t>(a)];
              const auto kb = keys[static_cast<std::size_t>(b)];
              return ka != kb ? ka < kb : a < b;
            });
  out.base_index.resize(static_cast<std::size_t>(n));
  for (std::int64_t r = 0; r < n; ++r)
    out.base_index[static_cast<std::size_t>(out.perm[r])] = r;
  return out;
}

}  // namespace dm3d
