#include "casseg/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace casseg {

void DatasetStats::validate() const {
  require(clip_lo_percentile >= 0.0 && clip_lo_percentile < clip_hi_percentile && clip_hi_percentile <= 100.0,
          ErrorKind::Config, "clip percentiles must satisfy 0 <= lo < hi <= 100");
  require(std::isfinite(global_mean), ErrorKind::Config, "global_mean must be finite");
  require(std::isfinite(global_std) && global_std > 0.0, ErrorKind::Config, "global_std must be > 0");
}

namespace {

// Value at fractional rank r of `v`, reordering v in the process.
double value_at_rank(std::vector<float>& v, double rank) {
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const double frac = rank - static_cast<double>(lo);
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(lo), v.end());
  const double a = v[lo];
  if (frac == 0.0 || lo + 1 >= v.size()) return a;
  // The next order statistic is the minimum of the upper partition.
  const double b = *std::min_element(v.begin() + static_cast<std::ptrdiff_t>(lo) + 1, v.end());
  return a + frac * (b - a);
}

double rank_of(std::size_t n, double p) { return p / 100.0 * static_cast<double>(n - 1); }

struct Moments {
  double mean = 0.0;
  double std = 1.0;
};

Moments clipped_moments(std::span<const Volume> volumes, double lo_p, double hi_p) {
  double sum = 0.0;
  std::int64_t count = 0;
  std::vector<std::pair<double, double>> bounds;
  for (const auto& v : volumes) {
    bounds.push_back(clip_bounds(v.voxels(), lo_p, hi_p));
    for (float x : v.voxels()) sum += std::clamp<double>(x, bounds.back().first, bounds.back().second);
    count += v.size();
  }
  Moments m;
  m.mean = sum / static_cast<double>(count);
  double ss = 0.0;
  for (std::size_t k = 0; k < volumes.size(); ++k)
    for (float x : volumes[k].voxels()) {
      const double d = std::clamp<double>(x, bounds[k].first, bounds[k].second) - m.mean;
      ss += d * d;
    }
  m.std = std::sqrt(ss / static_cast<double>(count));
  if (!(m.std >= kMinStd)) m.std = 1.0;
  return m;
}

}  // namespace

double percentile(std::span<const float> values, double p) {
  require(!values.empty(), ErrorKind::Misuse, "percentile of an empty set");
  require(p >= 0.0 && p <= 100.0, ErrorKind::Misuse, "percentile must lie in [0,100]");
  std::vector<float> v(values.begin(), values.end());
  return value_at_rank(v, rank_of(v.size(), p));
}

std::pair<double, double> clip_bounds(std::span<const float> values, double lo_p, double hi_p) {
  require(!values.empty(), ErrorKind::Misuse, "clip bounds of an empty set");
  std::vector<float> v(values.begin(), values.end());
  const double hi = value_at_rank(v, rank_of(v.size(), hi_p));
  const double lo = value_at_rank(v, rank_of(v.size(), lo_p));
  return {lo, hi};
}

DatasetStats compute_dataset_stats(std::span<const Volume> volumes, const DatasetStats& config) {
  require(!volumes.empty(), ErrorKind::Misuse, "dataset statistics need at least one volume");
  DatasetStats stats = config;
  const Moments m = clipped_moments(volumes, config.clip_lo_percentile, config.clip_hi_percentile);
  stats.global_mean = m.mean;
  stats.global_std = m.std;
  stats.validate();
  return stats;
}

Volume normalize(const Volume& vol, const DatasetStats& stats) {
  stats.validate();
  const auto [lo, hi] = clip_bounds(vol.voxels(), stats.clip_lo_percentile, stats.clip_hi_percentile);
  double mean = stats.global_mean, std = stats.global_std;
  if (stats.per_case) {
    const Moments m = clipped_moments(std::span<const Volume>(&vol, 1), stats.clip_lo_percentile,
                                      stats.clip_hi_percentile);
    mean = m.mean;
    std = m.std;
  }
  Volume out(vol.dims(), vol.spacing());
  auto src = vol.voxels();
  auto dst = out.voxels();
  for (std::size_t i = 0; i < src.size(); ++i)
    dst[i] = static_cast<float>((std::clamp<double>(src[i], lo, hi) - mean) / std);
  return out;
}

Spacing3 stage1_spacing(const Spacing3& spacing) { return {2.0f * spacing[0], spacing[1], spacing[2]}; }

Volume prepare_stage1_input(const Volume& vol, const DatasetStats& stats) {
  return normalize(resample(vol, stage1_spacing(vol.spacing()), Interp::Linear), stats);
}

}  // namespace casseg
