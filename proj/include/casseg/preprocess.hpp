#pragma once

#include <span>
#include <utility>

#include "casseg/volume.hpp"

namespace casseg {

// Intensity statistics for standardisation. The clip percentiles are
// configuration; mean/std are collected from clipped training data.
struct DatasetStats {
  double clip_lo_percentile = 0.05;
  double clip_hi_percentile = 99.5;
  double global_mean = 0.0;
  double global_std = 1.0;
  // Standardise each case with its own clipped mean/std instead of the global ones.
  bool per_case = false;

  void validate() const;
  bool operator==(const DatasetStats&) const = default;
};

inline constexpr double kMinStd = 1e-8;

// Linear-interpolated percentile: rank p/100 * (n-1) into the sorted values.
double percentile(std::span<const float> values, double p);

// (P_lo, P_hi) of one case.
std::pair<double, double> clip_bounds(std::span<const float> values, double lo_percentile, double hi_percentile);

// Mean/std over all voxels of all volumes after per-case percentile clipping.
// Percentile fields are copied from `config`; std below kMinStd becomes 1.
DatasetStats compute_dataset_stats(std::span<const Volume> volumes, const DatasetStats& config = {});

// Per-case percentile clip, then (x - mean) / std.
Volume normalize(const Volume& vol, const DatasetStats& stats);

// Spacing with the slice (z) axis doubled.
Spacing3 stage1_spacing(const Spacing3& spacing);

// Resample to doubled slice spacing (linear), then normalise.
Volume prepare_stage1_input(const Volume& vol, const DatasetStats& stats);

}  // namespace casseg
