#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dm3d/geometry.hpp"
#include "dm3d/pipeline.hpp"

namespace dm3d {

enum class CloudFormat { kAuto, kXyz, kPlyAscii };

/// XYZ: one "x y z" triple per line ('#' comments and blank lines skipped).
/// PLY (ascii): standard header, vertex element with x/y/z float properties;
/// extra properties and elements are ignored. Parse failures throw with the
/// offending line number.
PointCloud load_pointcloud(const std::string& path,
                           CloudFormat format = CloudFormat::kAuto);

/// Self-describing binary container: magic "DM3DPRM1", version, then named
/// arrays (name, rows, cols, row-major 64-bit floats), all little-endian.
void save_arrays(const std::string& path,
                 const std::vector<std::pair<std::string, Tensor>>& arrays);
std::vector<std::pair<std::string, Tensor>> load_arrays(const std::string& path);

void save_params(const std::string& path, ModelParams& params);
/// Loads into an existing parameter set; every stored array must match an
/// existing name and shape (errors name the offending array).
void load_params(const std::string& path, ModelParams& params);

/// Flat key=value run configuration ('#' comments allowed). Unknown keys and
/// malformed values are errors; anything omitted keeps its default.
struct RunConfig {
  ModelConfig model;
  std::uint64_t seed = 0;
  std::string cloud_path;
  std::string params_path;

  void validate() const { model.validate(); }
};

RunConfig load_run_config(const std::string& path);

}  // namespace dm3d
