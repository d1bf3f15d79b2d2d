#pragma once

#include <cstdint>
#include <string>

#include "dm3d/rng.hpp"
#include "dm3d/tensor.hpp"

namespace testsup {

/// Deterministic test tensor: every (seed, name) pair owns its own stream.
inline dm3d::Tensor random_tensor(std::uint64_t seed, const std::string& name,
                                  std::int64_t rows, std::int64_t cols,
                                  double sd = 1.0) {
  dm3d::SplitMix64 gen(dm3d::named_seed(seed, name));
  dm3d::Tensor t(rows, cols);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = gen.normal() * sd;
  return t;
}

inline dm3d::Tensor random_uniform(std::uint64_t seed, const std::string& name,
                                   std::int64_t rows, std::int64_t cols,
                                   double lo = 0.0, double hi = 1.0) {
  dm3d::SplitMix64 gen(dm3d::named_seed(seed, name));
  dm3d::Tensor t(rows, cols);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = gen.uniform(lo, hi);
  return t;
}

inline std::string fixture(const std::string& name) {
#ifdef DM3D_FIXTURE_DIR
  return std::string(DM3D_FIXTURE_DIR) + "/" + name;
#else
  return "tests/fixtures/" + name;
#endif
}

}  // namespace testsup
