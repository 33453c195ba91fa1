#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "casseg/preprocess.hpp"
#include "oracles.hpp"

using namespace casseg;

namespace {

template <class F>
ErrorKind kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an error";
  return ErrorKind::Io;
}

Volume ramp(Dims3 d = {10, 10, 10}) {
  Volume v(d, {1, 1, 1});
  for (std::int64_t i = 0; i < v.size(); ++i) v.voxels()[i] = static_cast<float>(i);
  return v;
}

}  // namespace

TEST(Percentile, RampBounds) {
  const auto v = ramp();
  const auto [lo, hi] = clip_bounds(v.voxels(), 0.05, 99.5);
  EXPECT_NEAR(lo, 0.4995, 1e-9);
  EXPECT_NEAR(hi, 994.005, 1e-9);
  EXPECT_EQ(percentile(v.voxels(), 0.0), 0.0);
  EXPECT_EQ(percentile(v.voxels(), 100.0), 999.0);
  EXPECT_EQ(percentile(v.voxels(), 50.0), 499.5);
  EXPECT_EQ(kind_of([] { percentile({}, 5.0); }), ErrorKind::Misuse);
}

TEST(Percentile, MatchesSortOracle) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<float> v(1 + rng() % 500);
    for (auto& x : v) x = static_cast<float>(std::normal_distribution<double>(0, 100)(rng));
    const auto [lo, hi] = clip_bounds(v, 0.05, 99.5);
    EXPECT_EQ(lo, oracle::sorted_percentile(v, 0.05));
    EXPECT_EQ(hi, oracle::sorted_percentile(v, 99.5));
  }
}

TEST(DatasetStats, ConstantVolumeGuard) {
  const Volume v({3, 3, 3}, {1, 1, 1}, 7.0f);
  const auto s = compute_dataset_stats(std::span<const Volume>(&v, 1));
  EXPECT_EQ(s.global_mean, 7.0);
  EXPECT_EQ(s.global_std, 1.0);
  EXPECT_EQ(s.clip_lo_percentile, 0.05);
  EXPECT_EQ(s.clip_hi_percentile, 99.5);
  const auto n = normalize(v, s);
  for (float x : n.voxels()) EXPECT_EQ(x, 0.0f);
  EXPECT_EQ(kind_of([] { compute_dataset_stats({}); }), ErrorKind::Misuse);
}

TEST(DatasetStats, TwoVolumesMatchFlatComputation) {
  std::mt19937_64 rng(2);
  std::vector<Volume> vols{Volume({4, 5, 6}, {1, 1, 1}), Volume({3, 3, 3}, {2, 1, 1})};
  for (auto& v : vols)
    for (auto& x : v.voxels()) x = static_cast<float>(std::normal_distribution<double>(50, 30)(rng));
  const auto s = compute_dataset_stats(vols);
  std::vector<double> flat;
  for (const auto& v : vols) {
    const std::vector<float> raw(v.voxels().begin(), v.voxels().end());
    const double lo = oracle::sorted_percentile(raw, 0.05), hi = oracle::sorted_percentile(raw, 99.5);
    for (float x : raw) flat.push_back(std::clamp<double>(x, lo, hi));
  }
  double m = 0, ss = 0;
  for (double x : flat) m += x;
  m /= flat.size();
  for (double x : flat) ss += (x - m) * (x - m);
  EXPECT_NEAR(s.global_mean, m, 1e-6);
  EXPECT_NEAR(s.global_std, std::sqrt(ss / flat.size()), 1e-6);
}

TEST(Normalize, RampSaturatesOutsideBounds) {
  const auto v = ramp();
  DatasetStats s;
  const auto n = normalize(v, s);
  EXPECT_NEAR(n.voxels()[0], 0.4995f, 1e-6);
  EXPECT_NEAR(n.voxels()[999], 994.005f, 1e-3);
  EXPECT_NEAR(n.voxels()[995], 994.005f, 1e-3);
  EXPECT_EQ(n.voxels()[500], 500.0f);
}

TEST(Normalize, FixedPointAndConstant) {
  std::mt19937_64 rng(3);
  Volume v({5, 5, 5}, {1, 1, 1});
  for (auto& x : v.voxels()) x = static_cast<float>(std::uniform_real_distribution<double>(-1, 1)(rng));
  DatasetStats s;
  s.clip_lo_percentile = 0.0;
  s.clip_hi_percentile = 100.0;
  const auto n = normalize(v, s);
  for (std::int64_t i = 0; i < v.size(); ++i) EXPECT_NEAR(n.voxels()[i], v.voxels()[i], 1e-6);
  s.global_mean = 2.0;
  s.global_std = 4.0;
  const auto c = normalize(Volume({2, 2, 2}, {1, 1, 1}, 10.0f), s);
  for (float x : c.voxels()) EXPECT_EQ(x, 2.0f);
}

TEST(Normalize, OutlierFractionInvariant) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    Volume v({6, 7, 8}, {1, 1, 1});
    for (auto& x : v.voxels()) x = static_cast<float>(std::cauchy_distribution<double>(0, 10)(rng));
    DatasetStats s;
    const auto [lo, hi] = clip_bounds(v.voxels(), s.clip_lo_percentile, s.clip_hi_percentile);
    std::int64_t outside = 0;
    for (float x : v.voxels()) outside += x < lo || x > hi;
    // Only order statistics strictly beyond the interpolation ranks can fall outside.
    const double last = static_cast<double>(v.size() - 1);
    EXPECT_LE(outside, std::ceil(s.clip_lo_percentile / 100.0 * last) + last -
                           std::floor(s.clip_hi_percentile / 100.0 * last));
    const auto n = normalize(v, s);
    for (float x : n.voxels()) {
      EXPECT_GE(x, static_cast<float>(lo) - 1e-3f);
      EXPECT_LE(x, static_cast<float>(hi) + 1e-3f);
    }
  }
}

TEST(Stage1Input, DoublesSliceSpacing) {
  const Volume v({138, 8, 6}, {1.0f, 0.8f, 0.8f}, 1.0f);
  const auto p = prepare_stage1_input(v, {});
  EXPECT_EQ(p.dims(), (Dims3{69, 8, 6}));
  EXPECT_EQ(p.spacing(), (Spacing3{2.0f, 0.8f, 0.8f}));
  const auto q = prepare_stage1_input(p, {});
  EXPECT_EQ(q.dims()[0], 35);
  EXPECT_EQ(stage1_spacing(stage1_spacing({1.5f, 1, 1}))[0], 6.0f);
}

TEST(DatasetStats, ValidationErrors) {
  DatasetStats s;
  s.clip_lo_percentile = 60;
  s.clip_hi_percentile = 40;
  EXPECT_EQ(kind_of([&] { s.validate(); }), ErrorKind::Config);
  s = {};
  s.global_std = 0.0;
  EXPECT_EQ(kind_of([&] { normalize(Volume({1, 1, 1}, {1, 1, 1}), s); }), ErrorKind::Config);
}
