#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "dm3d/tensor.hpp"

namespace dm3d {

/// Quantization setup for 3D Hilbert serialization. Grid side is 2^order per
/// axis; degenerate bbox axes are widened by a small epsilon at use time.
struct HilbertConfig {
  int order = 9;                       // bits per axis, 1..16
  std::array<double, 3> lo{0, 0, 0};   // bbox minimum corner
  std::array<double, 3> hi{1, 1, 1};   // bbox maximum corner

  void validate() const;
};

/// Result of serializing N centers: perm[r] is the original index holding
/// rank r, and base_index[perm[r]] = r.
struct SerializedOrder {
  std::vector<std::int64_t> perm;
  std::vector<std::int64_t> base_index;
};

/// Maps a grid cell to its Hilbert curve index in [0, 8^order). Transposed-
/// bits construction with axis order (x, y, z). Bijective over the grid.
std::uint64_t hilbert_encode(std::uint32_t x, std::uint32_t y, std::uint32_t z,
                             int order);

/// Inverse of hilbert_encode.
std::array<std::uint32_t, 3> hilbert_decode(std::uint64_t key, int order);

/// Axis-aligned bbox of an Nx3 coordinate matrix, for HilbertConfig.
HilbertConfig bbox_config(const Tensor& centers, int order = 9);

/// Quantizes each center into the configured grid, encodes, and sorts by
/// (curve key, original index) so quantization collisions stay deterministic.
SerializedOrder serialize(const Tensor& centers, const HilbertConfig& cfg);

/// Curve keys only (the sort keys used by serialize), one per center.
std::vector<std::uint64_t> hilbert_keys(const Tensor& centers,
                                        const HilbertConfig& cfg);

}  // namespace dm3d
