#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "casseg/gradcheck.hpp"
#include "casseg/ops.hpp"
#include "gradient_suite.hpp"
#include "oracles.hpp"

using namespace casseg;
using namespace casseg::nn;

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

std::vector<double> vals(const Tensor<double>& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

TEST(Tensor, ShapeInvariant) {
  EXPECT_EQ(kind_of([] { Tensor<float>::from_data({2, 3}, std::vector<float>(5)); }), ErrorKind::Shape);
  const auto t = Tensor<float>::zeros({1, 2, 3, 4, 5});
  EXPECT_EQ(t.numel(), 120);
}

TEST(Backward, SumGivesOnes) {
  auto x = Tensor<double>::from_data({1, 1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8}, true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, HalfSquareGivesX) {
  auto x = Tensor<double>::from_data({1, 1, 1, 1, 3}, {-1.5, 0.25, 4.0}, true);
  backward(scale(sum(mul(x, x)), 0.5));
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], x.values()[i]);
}

TEST(Backward, RepeatedCallsAccumulateOnLeaves) {
  auto x = Tensor<double>::from_data({1, 1, 1, 1, 2}, {1, 2}, true);
  const auto loss = sum(scale(x, 3.0));
  backward(loss);
  backward(loss);
  for (double g : x.grad()) EXPECT_EQ(g, 6.0);
  x.zero_grad();
  backward(loss);
  for (double g : x.grad()) EXPECT_EQ(g, 3.0);
}

TEST(Backward, NonScalarLossIsMisuse) {
  auto x = Tensor<double>::from_data({1, 1, 1, 1, 2}, {1, 2}, true);
  EXPECT_EQ(kind_of([&] { backward(scale(x, 2.0)); }), ErrorKind::Misuse);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  auto x = Tensor<double>::from_data({1, 1, 1, 1, 2}, {1, 2}, true);
  Tensor<double> y;
  {
    NoGradGuard g;
    y = scale(x, 2.0);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.node()->inputs.empty());
  EXPECT_TRUE(grad_enabled());
}

TEST(Graph, TopologicalOrder) {
  auto x = Tensor<double>::from_data({1, 1, 1, 1, 2}, {1, 2}, true);
  auto a = scale(x, 2.0);
  auto b = add(a, x);
  auto loss = sum(mul(b, a));
  const auto g = Graph<double>::trace(loss);
  std::unordered_map<const Node<double>*, std::size_t> pos;
  for (std::size_t i = 0; i < g.size(); ++i) pos[g.nodes()[i]] = i;
  for (std::size_t i = 0; i < g.size(); ++i)
    for (const auto& in : g.nodes()[i]->inputs) EXPECT_LT(pos.at(in.get()), i);
  EXPECT_EQ(g.nodes().back(), loss.node());
}

TEST(Conv3d, PointwiseIdentityAndDeltaKernel) {
  std::mt19937_64 rng(1);
  auto x = oracle::random_tensor<double>({2, 1, 3, 4, 5}, rng);
  const auto one = Tensor<double>::from_data({1, 1, 1, 1, 1}, {1.0});
  const auto zero_bias = Tensor<double>::from_data({1}, {0.0});
  EXPECT_EQ(vals(conv3d(x, one, zero_bias, {1, 1, 1})), vals(x));
  std::vector<double> delta(27, 0.0);
  delta[13] = 1.0;
  const auto dk = Tensor<double>::from_data({1, 1, 3, 3, 3}, delta);
  for (Shape s : {Shape{1, 1, 1, 1, 1}, Shape{1, 1, 5, 2, 7}, Shape{2, 1, 6, 6, 6}}) {
    auto y = oracle::random_tensor<double>(s, rng);
    EXPECT_EQ(vals(conv3d(y, dk)), vals(y));
  }
}

TEST(Conv3d, MatchesLoopOracleOnSpecExample) {
  std::mt19937_64 rng(2);
  const Shape xs{1, 2, 4, 4, 4}, ws{3, 2, 1, 3, 3};
  auto x = oracle::random_tensor<double>(xs, rng);
  auto w = oracle::random_tensor<double>(ws, rng);
  const auto y = conv3d(x, w, {1, 2, 2});
  EXPECT_EQ(y.shape(), (Shape{1, 3, 4, 2, 2}));
  const auto ref = oracle::conv3d(vals(x), xs, vals(w), ws, nullptr, {1, 2, 2});
  EXPECT_LT(oracle::max_abs_diff(vals(y), ref), 1e-12);
}

TEST(Conv3d, Errors) {
  const auto x = Tensor<double>::zeros({1, 2, 3, 3, 3});
  EXPECT_EQ(kind_of([&] { conv3d(x, Tensor<double>::zeros({1, 3, 3, 3, 3})); }), ErrorKind::Shape);
  EXPECT_EQ(kind_of([&] { conv3d(x, Tensor<double>::zeros({1, 2, 2, 3, 3})); }), ErrorKind::Unsupported);
}

TEST(Conv3d, FloatMatchesOracleOnRandomShapes) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> dim(1, 6), ch(1, 4), k(0, 1), s(1, 2);
  for (int trial = 0; trial < 20; ++trial) {
    const Shape xs{1 + trial % 2, ch(rng), dim(rng), dim(rng), dim(rng)};
    const Shape ws{ch(rng), xs[1], 1 + 2 * k(rng), 1 + 2 * k(rng), 1 + 2 * k(rng)};
    const Int3 st{s(rng), s(rng), s(rng)};
    auto x = oracle::random_tensor<float>(xs, rng);
    auto w = oracle::random_tensor<float>(ws, rng);
    auto b = oracle::random_tensor<float>({ws[0]}, rng);
    const auto y = conv3d(x, w, b, st);
    const std::vector<double> xd(x.values().begin(), x.values().end()), wd(w.values().begin(), w.values().end()),
        bd(b.values().begin(), b.values().end()), yd(y.values().begin(), y.values().end());
    EXPECT_LT(oracle::max_abs_diff(yd, oracle::conv3d(xd, xs, wd, ws, &bd, st)), 1e-5);
  }
}

TEST(ConvTranspose3d, IdentityReplicationAndShapes) {
  std::mt19937_64 rng(4);
  auto x = oracle::random_tensor<double>({1, 1, 2, 3, 2}, rng);
  EXPECT_EQ(vals(conv_transpose3d(x, Tensor<double>::from_data({1, 1, 1, 1, 1}, {1.0}), {1, 1, 1})), vals(x));

  const auto small = Tensor<double>::from_data({1, 1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  const auto y = conv_transpose3d(small, Tensor<double>::full({1, 1, 2, 2, 2}, 1.0), {2, 2, 2});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 4, 4, 4}));
  for (int z = 0; z < 4; ++z)
    for (int yy = 0; yy < 4; ++yy)
      for (int xx = 0; xx < 4; ++xx)
        EXPECT_EQ(y.values()[(z * 4 + yy) * 4 + xx], small.values()[((z / 2) * 2 + yy / 2) * 2 + xx / 2]);

  const auto big = conv_transpose3d(Tensor<float>::zeros({1, 1, 40, 128, 128}), Tensor<float>::zeros({1, 1, 2, 2, 2}),
                                    {2, 2, 2});
  EXPECT_EQ(big.shape(), (Shape{1, 1, 80, 256, 256}));
  EXPECT_EQ(kind_of([&] { conv_transpose3d(x, Tensor<double>::zeros({1, 1, 3, 3, 3}), {2, 2, 2}); }),
            ErrorKind::Unsupported);
}

TEST(MaxPool3d, ShapesConstantsAndOracle) {
  const auto big = max_pool3d(Tensor<float>::zeros({1, 1, 80, 160, 160}), {1, 2, 2});
  EXPECT_EQ(big.shape(), (Shape{1, 1, 80, 80, 80}));
  const auto c = max_pool3d(Tensor<double>::full({1, 2, 2, 4, 4}, 3.5), {2, 2, 2});
  for (double v : c.values()) EXPECT_EQ(v, 3.5);
  std::mt19937_64 rng(5);
  auto x = oracle::random_tensor<double>({1, 1, 2, 4, 4}, rng);
  EXPECT_EQ(vals(max_pool3d(x, {2, 2, 2})), oracle::max_pool3d(vals(x), x.shape(), {2, 2, 2}));
  EXPECT_EQ(kind_of([&] { max_pool3d(Tensor<double>::zeros({1, 1, 3, 4, 4}), {2, 2, 2}); }), ErrorKind::Shape);
}

TEST(MaxPool3d, TiesRouteToFirstIndex) {
  auto x = Tensor<double>::full({1, 1, 2, 2, 2}, 1.0, true);
  backward(sum(max_pool3d(x, {2, 2, 2})));
  EXPECT_EQ(x.grad()[0], 1.0);
  for (int i = 1; i < 8; ++i) EXPECT_EQ(x.grad()[i], 0.0);
}

TEST(MaxPool3d, PoolThenTransposedConvRestoresShape) {
  const auto x = Tensor<double>::zeros({1, 3, 4, 6, 2});
  for (Int3 k : {Int3{2, 2, 2}, Int3{1, 2, 2}, Int3{2, 1, 1}}) {
    const auto p = max_pool3d(x, k);
    const auto u = conv_transpose3d(p, Tensor<double>::zeros({3, 3, k[0], k[1], k[2]}), k);
    EXPECT_EQ(u.shape(), x.shape());
  }
}

TEST(InstanceNorm, Statistics) {
  const auto ones = Tensor<double>::full({2}, 1.0), zeros = Tensor<double>::zeros({2});
  const auto flat = instance_norm(Tensor<double>::full({1, 2, 2, 3, 3}, 7.0), ones, zeros);
  for (double v : flat.values())
    EXPECT_LE(std::abs(v), 1e-6);
  EXPECT_TRUE(std::isfinite(instance_norm(Tensor<double>::full({1, 2, 1, 1, 1}, 7.0), ones, zeros).values()[0]));

  std::mt19937_64 rng(6);
  const auto x = oracle::random_tensor<double>({2, 2, 4, 5, 6}, rng, false, -3.0, 9.0);
  const auto y = instance_norm(x, ones, zeros);
  const auto z = instance_norm(y, Tensor<double>::full({2}, 2.0), Tensor<double>::full({2}, 3.0));
  const std::int64_t sp = 120;
  for (std::int64_t p = 0; p < 4; ++p) {
    double m = 0, m2 = 0, v = 0, v2 = 0;
    for (std::int64_t i = 0; i < sp; ++i) {
      m += y.values()[p * sp + i];
      m2 += z.values()[p * sp + i];
    }
    m /= sp;
    m2 /= sp;
    for (std::int64_t i = 0; i < sp; ++i) {
      v += std::pow(y.values()[p * sp + i] - m, 2);
      v2 += std::pow(z.values()[p * sp + i] - m2, 2);
    }
    EXPECT_LT(std::abs(m), 1e-5);
    EXPECT_NEAR(v / sp, 1.0, 1e-3);
    EXPECT_NEAR(m2, 3.0, 1e-3);
    EXPECT_NEAR(std::sqrt(v2 / sp), 2.0, 1e-3);
  }
}

TEST(LeakyRelu, Definition) {
  const auto x = Tensor<double>::from_data({1, 1, 1, 1, 3}, {-2.0, 0.0, 3.0}, true);
  const auto y = leaky_relu(x, 0.01);
  EXPECT_DOUBLE_EQ(y.values()[0], -0.02);
  EXPECT_EQ(y.values()[2], 3.0);
  EXPECT_EQ(leaky_relu(Tensor<double>::from_data({1}, {-5.0}), 0.0).values()[0], 0.0);
  backward(sum(y));
  EXPECT_EQ(x.grad()[1], 1.0);
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.01);
}

TEST(Softmax, ClosedForms) {
  const auto eq = softmax_channels(Tensor<double>::from_data({1, 2, 1, 1, 1}, {0.7, 0.7}));
  EXPECT_DOUBLE_EQ(eq.values()[0], 0.5);
  const auto r = softmax_channels(Tensor<double>::from_data({1, 2, 1, 1, 1}, {0.0, std::log(3.0)}));
  EXPECT_NEAR(r.values()[0], 0.25, 1e-12);
  EXPECT_NEAR(r.values()[1], 0.75, 1e-12);

  std::mt19937_64 rng(7);
  auto x = oracle::random_tensor<double>({2, 3, 2, 3, 4}, rng, false, -50.0, 50.0);
  const auto p = softmax_channels(x);
  auto shifted = x.detach();
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t c = 0; c < 3; ++c)
      for (std::int64_t i = 0; i < 24; ++i) shifted.values()[(n * 3 + c) * 24 + i] += 1000.0 * (i % 5);
  const auto q = softmax_channels(shifted);
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t i = 0; i < 24; ++i) {
      double s = 0;
      for (std::int64_t c = 0; c < 3; ++c) {
        const auto k = (n * 3 + c) * 24 + i;
        s += p.values()[k];
        EXPECT_NEAR(p.values()[k], q.values()[k], 1e-6);
        EXPECT_TRUE(std::isfinite(q.values()[k]));
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Concat, ShapesAndSlicing) {
  std::mt19937_64 rng(8);
  const auto a = oracle::random_tensor<double>({1, 1, 2, 3, 4}, rng), b = oracle::random_tensor<double>({1, 1, 2, 3, 4}, rng);
  const auto c = concat_channels<double>({a, b});
  EXPECT_EQ(c.shape(), (Shape{1, 2, 2, 3, 4}));
  EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), c.values().begin()));
  EXPECT_TRUE(std::equal(b.values().begin(), b.values().end(), c.values().begin() + 24));
  EXPECT_EQ(vals(concat_channels<double>({a})), vals(a));
  EXPECT_EQ(kind_of([&] { concat_channels<double>({a, Tensor<double>::zeros({1, 1, 2, 3, 5})}); }), ErrorKind::Shape);
}

TEST(Add, IdentityOracleAndGradient) {
  std::mt19937_64 rng(9);
  auto x = oracle::random_tensor<double>({1, 2, 2, 2, 2}, rng, true), y = oracle::random_tensor<double>({1, 2, 2, 2, 2}, rng);
  EXPECT_EQ(vals(add(x, Tensor<double>::zeros(x.shape()))), vals(x));
  const auto s = add(x, y);
  for (int i = 0; i < 16; ++i) EXPECT_EQ(s.values()[i], x.values()[i] + y.values()[i]);
  backward(sum(s));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
  EXPECT_EQ(kind_of([&] { add(x, Tensor<double>::zeros({1, 2, 2, 2, 3})); }), ErrorKind::Shape);
}

TEST(GradCheck, LinearFunctionIsExact) {
  std::mt19937_64 rng(10);
  auto x = oracle::random_tensor<double>({1, 2, 2, 2, 2}, rng, true);
  EXPECT_LT(finite_diff_check([=] { return gradsuite::weighted_sum(scale(x, 3.0), 4); }, {x}), 1e-9);
}

TEST(GradCheck, CompositeOnTinyInput) {
  std::mt19937_64 rng(11);
  auto x = oracle::random_tensor<double>({1, 1, 2, 2, 2}, rng, true);
  auto w = oracle::random_tensor<double>({2, 1, 3, 3, 3}, rng, true);
  auto g = oracle::random_tensor<double>({2}, rng, true, 0.5, 1.5), b = oracle::random_tensor<double>({2}, rng, true);
  const double err = finite_diff_check(
      [=] { return gradsuite::weighted_sum(leaky_relu(instance_norm(conv3d(x, w), g, b), 0.01), 5); }, {x, w, g, b});
  EXPECT_LT(err, 1e-5);
}

TEST(GradCheck, DetectsSignFlippedBackward) {
  auto x = Tensor<double>::from_data({1, 1, 1, 1, 3}, {0.3, -0.2, 0.9}, true);
  auto bad_scale = [](const Tensor<double>& t) {
    std::vector<double> v(t.values().begin(), t.values().end());
    for (auto& e : v) e *= 2.0;
    return make_result<double>("bad", t.shape(), v, {t}, [](Node<double>& self) {
      std::vector<double> g(self.grad.size());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = -2.0 * self.grad[i];
      accumulate_grad<double>(self.inputs[0].get(), g);
    });
  };
  EXPECT_NEAR(finite_diff_check([=] { return sum(bad_scale(x)); }, {x}), 2.0, 1e-6);
}

TEST(GradCheck, ProbesStraddlingAKinkAreRechecked) {
  // 2e-5 sits inside the +-1e-4 probe of the leaky_relu kink at 0.
  auto x = Tensor<double>::from_data({1, 1, 1, 1, 2}, {2e-5, 0.5}, true);
  auto f = [=] { return sum(leaky_relu(x, 0.01)); };
  GradCheckOptions naive;
  naive.skip_kinks = false;
  EXPECT_GT(finite_diff_check_detailed(f, {x}, naive).max_rel_error, 0.1);
  const auto r = finite_diff_check_detailed(f, {x});
  EXPECT_LT(r.max_rel_error, 1e-9);
  EXPECT_EQ(r.coords_checked, 2);
  EXPECT_EQ(r.coords_refined, 1);
  GradCheckOptions no_retry;
  no_retry.min_eps = 0.0;
  const auto s = finite_diff_check_detailed(f, {x}, no_retry);
  EXPECT_EQ(s.coords_skipped, 1);
  EXPECT_EQ(s.coords_checked, 1);
  // A new pooling winner is a kink too.
  auto p = Tensor<double>::from_data({1, 1, 1, 1, 2}, {0.3, 0.30001}, true);
  EXPECT_EQ(finite_diff_check_detailed([=] { return sum(max_pool3d(p, {1, 1, 2})); }, {p}, no_retry).coords_skipped, 2);
}

TEST(GradCheck, NonFiniteIsNumericError) {
  auto x = Tensor<double>::from_data({1}, {1.0}, true);
  EXPECT_EQ(kind_of([&] { finite_diff_check([=] { return scale(x, INFINITY); }, {x}); }), ErrorKind::Numeric);
}

TEST(GradientSuite, EveryOpWithinTolerance) {
  for (const auto& c : gradsuite::op_cases()) {
    EXPECT_LT(c.max_rel_error, c.tolerance) << c.name;
    EXPECT_GT(c.coords, 0) << c.name;
  }
}
