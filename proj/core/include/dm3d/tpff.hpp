#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dm3d/autodiff.hpp"

namespace dm3d {

/// Three same-shape branch outputs awaiting fusion.
struct TriPathBundle {
  ad::Var f_fwd;
  ad::Var f_chan;
  ad::Var f_def;
};

struct TpffParams {
  ad::Var fuse_w;  // C x (3C / groups), grouped pointwise, no bias
  ad::Var freq_w;  // 2C x (2C / groups), grouped pointwise
  ad::Var freq_b;  // 1 x 2C
  std::int64_t groups = 32;

  void visit(const std::string& prefix,
             const std::function<void(const std::string&, ad::Var&)>& f);
};

/// Each path scaled by the mean of the other two paths' sigmoid maps,
/// cycling (F,C,D) -> (C,D,F) -> (D,F,C).
TriPathBundle cross_modulate(const TriPathBundle& bundle);

/// Channel destination map for a shuffle with g groups over c channels:
/// index k*(c/g) + m moves to m*g + k. Returns out_index_of[src].
std::vector<std::int64_t> channel_shuffle_map(std::int64_t channels,
                                              std::int64_t groups);

/// Concatenate the three paths, grouped-pointwise fuse 3C -> C, shuffle.
ad::Var grouped_fuse_shuffle(const TriPathBundle& modulated,
                             const TpffParams& params);

/// DFT along the sequence, grouped pointwise map on [re | im], inverse DFT,
/// real part.
ad::Var frequency_enhance(const ad::Var& x, const TpffParams& params);

/// cross_modulate -> grouped_fuse_shuffle -> frequency_enhance.
ad::Var tpff(const TriPathBundle& bundle, const TpffParams& params);

}  // namespace dm3d
