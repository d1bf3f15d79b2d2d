#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace dm3d {

/// splitmix64: the documented PRNG behind all seeded parameter
/// initialization. Every parameter array draws from its own stream, keyed by
/// (global seed, array name), so adding or reordering arrays never perturbs
/// the values of the others.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1).
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) {
    return lo + (hi - lo) * next_double();
  }

  /// Standard normal via Box-Muller (explicit, to stay independent of the
  /// standard library's unspecified distribution algorithms).
  double normal() {
    double u1 = next_double();
    while (u1 == 0.0) u1 = next_double();
    const double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::uint64_t state_;
};

/// FNV-1a over the array name, mixed with the run seed.
inline std::uint64_t named_seed(std::uint64_t seed, std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h ^ (seed + 0x9e3779b97f4a7c15ULL);
}

}  // namespace dm3d
