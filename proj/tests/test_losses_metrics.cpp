#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "casseg/losses.hpp"
#include "casseg/metrics.hpp"
#include "json.hpp"
#include "oracles.hpp"

using namespace casseg;
using casseg::nn::Tensor;

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

LabelBatch batch_of(Dims3 d, std::vector<std::uint8_t> labels, std::int64_t n = 1) {
  LabelBatch b;
  b.batch = n;
  b.dims = d;
  b.labels = std::move(labels);
  return b;
}

Tensor<double> one_hot(const LabelBatch& t, int classes) {
  const auto sp = t.voxels_per_case();
  std::vector<double> v(static_cast<std::size_t>(t.batch * classes * sp), 0.0);
  for (std::int64_t n = 0; n < t.batch; ++n)
    for (std::int64_t i = 0; i < sp; ++i) v[(n * classes + t.labels[n * sp + i]) * sp + i] = 1.0;
  return Tensor<double>::from_data({t.batch, classes, t.dims[0], t.dims[1], t.dims[2]}, v);
}

double round2(double x) { return std::round(x * 100.0) / 100.0; }

LabelMask mask_from(Dims3 d, std::vector<std::uint8_t> v) { return LabelMask(d, {1, 1, 1}, std::move(v)); }

}  // namespace

TEST(DiceLoss, PerfectAndEmpty) {
  std::mt19937_64 rng(1);
  std::vector<std::uint8_t> l(64);
  for (auto& v : l) v = rng() % 3;
  const auto t = batch_of({4, 4, 4}, l);
  EXPECT_LT(dice_loss(one_hot(t, 3), t).item(), 1e-4);
  const auto empty = batch_of({2, 2, 2}, std::vector<std::uint8_t>(8, 0));
  EXPECT_NEAR(dice_loss(one_hot(empty, 2), empty).item(), 0.0, 1e-9);
}

TEST(DiceLoss, UniformClosedForm) {
  // One foreground class, f of n voxels, uniform 1/C with C = 2.
  const std::int64_t n = 27, f = 5;
  std::vector<std::uint8_t> l(n, 0);
  for (int i = 0; i < f; ++i) l[i * 4] = 1;
  const auto t = batch_of({3, 3, 3}, l);
  const double s = 1e-5, p = 0.5;
  const double expect = 1.0 - (2.0 * p * f + s) / (p * n + f + s);
  EXPECT_NEAR(dice_loss(Tensor<double>::full({1, 2, 3, 3, 3}, 0.5), t).item(), expect, 1e-12);
}

TEST(DiceLoss, RangeAndMonotone) {
  const auto t = batch_of({1, 2, 4}, {0, 0, 1, 1, 0, 1, 0, 0});
  double prev = 2.0;
  for (int step = 0; step <= 10; ++step) {
    const double a = step / 10.0;
    std::vector<double> v(16);
    for (int i = 0; i < 8; ++i) {
      const double p1 = t.labels[i] == 1 ? 0.2 + 0.8 * a : 0.2;
      v[8 + i] = p1;
      v[i] = 1.0 - p1;
    }
    const double loss = dice_loss(Tensor<double>::from_data({1, 2, 1, 2, 4}, v), t).item();
    EXPECT_GE(loss, 0.0);
    EXPECT_LE(loss, 1.0);
    EXPECT_LT(loss, prev);
    prev = loss;
  }
  EXPECT_EQ(kind_of([&] { dice_loss(Tensor<double>::full({1, 2, 1, 2, 4}, 1.5), t); }), ErrorKind::Misuse);
}

TEST(CrossEntropy, ClosedFormsAndScalarReference) {
  const auto t = batch_of({2, 2, 2}, {0, 1, 2, 0, 1, 2, 2, 1});
  EXPECT_NEAR(cross_entropy_loss(Tensor<double>::zeros({1, 3, 2, 2, 2}), t, {}).item(), std::log(3.0), 1e-12);
  auto big = one_hot(t, 3);
  for (auto& v : big.values()) v *= 50.0;
  EXPECT_LT(cross_entropy_loss(big, t, {}).item(), 1e-3);

  std::mt19937_64 rng(3);
  const auto z = oracle::random_tensor<double>({1, 3, 2, 2, 2}, rng, false, -3.0, 3.0);
  const std::vector<double> w{0.3, 1.0, 2.5};
  double ref = 0.0;
  for (int i = 0; i < 8; ++i) {
    double se = 0.0;
    for (int c = 0; c < 3; ++c) se += std::exp(z.values()[c * 8 + i]);
    ref += -w[t.labels[i]] * (z.values()[t.labels[i] * 8 + i] - std::log(se));
  }
  EXPECT_NEAR(cross_entropy_loss(z, t, w).item(), ref / 8.0, 1e-6);
  auto huge = Tensor<double>::full({1, 3, 2, 2, 2}, 1e4);
  EXPECT_TRUE(std::isfinite(cross_entropy_loss(huge, t, {}).item()));
}

TEST(CombinedLoss, IsSumAndPerfectIsZero) {
  std::mt19937_64 rng(4);
  const auto t = batch_of({2, 4, 4}, std::vector<std::uint8_t>(32, 0));
  auto lt = t;
  for (auto& v : lt.labels) v = rng() % 2;
  const auto z = oracle::random_tensor<double>({1, 2, 2, 4, 4}, rng);
  const double ce = cross_entropy_loss(z, lt, {}).item();
  const double dl = dice_loss(nn::softmax_channels(z), lt).item();
  EXPECT_EQ(combined_loss(z, lt).item(), ce + dl);
  auto perfect = one_hot(lt, 2);
  for (auto& v : perfect.values()) v *= 60.0;
  EXPECT_LT(combined_loss(perfect, lt).item(), 1e-4);
}

TEST(DeepSupervision, WeightingRules) {
  std::mt19937_64 rng(5);
  std::vector<std::uint8_t> l(32);
  for (auto& v : l) v = rng() % 3;
  const auto t = batch_of({2, 4, 4}, l);
  const auto a = oracle::random_tensor<double>({1, 3, 2, 4, 4}, rng), b = oracle::random_tensor<double>({1, 3, 2, 4, 4}, rng);
  LossConfig one;
  one.ds_weights = {1.0};
  const std::vector<Tensor<double>> single{a};
  EXPECT_EQ(deep_supervision_loss(std::span<const Tensor<double>>(single), t, one).item(), combined_loss(a, t).item());

  LossConfig two;
  two.ds_weights = {2.0 / 3.0, 1.0 / 3.0};
  const std::vector<Tensor<double>> same{a, a}, diff{a, b};
  EXPECT_NEAR(deep_supervision_loss(std::span<const Tensor<double>>(same), t, two).item(), combined_loss(a, t).item(),
              1e-12);
  const double manual = 2.0 / 3.0 * combined_loss(a, t).item() + 1.0 / 3.0 * combined_loss(b, t).item();
  EXPECT_NEAR(deep_supervision_loss(std::span<const Tensor<double>>(diff), t, two).item(), manual, 1e-7);
  EXPECT_EQ(kind_of([&] { deep_supervision_loss(std::span<const Tensor<double>>(single), t, two); }),
            ErrorKind::Config);
  const auto d = default_ds_weights(3);
  EXPECT_NEAR(d[0], 4.0 / 7.0, 1e-15);
  EXPECT_NEAR(d[2], 1.0 / 7.0, 1e-15);
}

TEST(DiceScore, Examples) {
  const Dims3 d{2, 2, 4};
  std::vector<std::uint8_t> p(16, 0), g(16, 0);
  for (int i = 0; i < 8; ++i) p[i] = 1;
  for (int i = 0; i < 4; ++i) g[i] = 1;
  EXPECT_NEAR(kidney_dice(mask_from(d, p), mask_from(d, g)), 2.0 * 4 / 12, 1e-12);
  EXPECT_EQ(dice_score(mask_from(d, p), mask_from(d, p), 1), 1.0);
  std::vector<std::uint8_t> q(16, 0);
  for (int i = 8; i < 16; ++i) q[i] = 1;
  EXPECT_EQ(kidney_dice(mask_from(d, p), mask_from(d, q)), 0.0);
  EXPECT_EQ(tumor_dice(mask_from(d, p), mask_from(d, q)), 1.0);
  // Tumor voxels count towards the kidney region.
  std::vector<std::uint8_t> k(16, 0);
  for (int i = 0; i < 8; ++i) k[i] = i < 4 ? 1 : 2;
  EXPECT_EQ(kidney_dice(mask_from(d, p), mask_from(d, k)), 1.0);
  EXPECT_EQ(tumor_dice(mask_from(d, p), mask_from(d, k)), 0.0);
  EXPECT_EQ(kind_of([&] { dice_score(mask_from(d, p), mask_from({2, 4, 2}, p), 1); }), ErrorKind::Shape);
}

TEST(DiceScore, SymmetryFuzz) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::uint8_t> a(125), b(125);
    for (auto& v : a) v = rng() % 3;
    for (auto& v : b) v = rng() % 3;
    for (int label : {1, 2}) {
      const double ab = dice_score(mask_from({5, 5, 5}, a), mask_from({5, 5, 5}, b), label);
      EXPECT_EQ(ab, dice_score(mask_from({5, 5, 5}, b), mask_from({5, 5, 5}, a), label));
      EXPECT_GE(ab, 0.0);
      EXPECT_LE(ab, 1.0);
    }
  }
}

TEST(CompositeDice, PublishedTopFive) {
  const struct {
    double kidney, tumor, composite;
  } rows[] = {{97.37, 85.09, 91.23}, {96.74, 84.54, 90.64}, {97.29, 83.21, 90.25}, {97.42, 83.06, 90.24},
              {97.34, 82.54, 89.94}};
  for (const auto& r : rows) EXPECT_EQ(round2(composite_dice({{"x", r.kidney, r.tumor}})), r.composite);
  EXPECT_EQ(composite_dice({{"a", 0.7, 0.7}, {"b", 0.7, 0.7}}), 0.7);
  EXPECT_EQ(kind_of([] { composite_dice({}); }), ErrorKind::Misuse);
}

TEST(EvalReport, TextAndJson) {
  const auto r = EvalReport::from_cases({{"case_000", 1.0, 0.5}, {"case_001", 0.5, 0.0}});
  EXPECT_DOUBLE_EQ(r.mean_kidney, 0.75);
  EXPECT_DOUBLE_EQ(r.mean_tumor, 0.25);
  EXPECT_DOUBLE_EQ(r.composite, 0.5);
  EXPECT_EQ(r.to_text(),
            "case_id\tkidney_dice\ttumor_dice\ncase_000\t1.000000\t0.500000\ncase_001\t0.500000\t0.000000\n"
            "mean\t0.750000\t0.250000\ncomposite\t0.500000\n");
  const auto j = nlohmann::json::parse(r.to_json());
  EXPECT_EQ(j["cases"].size(), 2u);
  EXPECT_EQ(j["cases"][1]["case_id"], "case_001");
  EXPECT_DOUBLE_EQ(j["aggregate"]["composite_dice"].get<double>(), 0.5);
}
