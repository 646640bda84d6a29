#include <gtest/gtest.h>

#include <cmath>

#include "stagenet/autodiff.hpp"
#include "stagenet/error.hpp"
#include "support.hpp"

using namespace stagenet;
using stagenet::testkit::gradient_check;
using stagenet::testkit::uniform_tensor;

namespace {

// Independent cross-correlation, straight from the definition.
std::vector<double> naive_conv(const Tensor& in, const Tensor& k, const Tensor& b) {
  const auto c = in.shape()[0], h = in.shape()[1], w = in.shape()[2];
  const auto o = k.shape()[0], kh = k.shape()[2], kw = k.shape()[3];
  const auto oh = h - kh + 1, ow = w - kw + 1;
  std::vector<double> out(o * oh * ow);
  for (std::size_t q = 0; q < o; ++q)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        double acc = b.at(q);
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t dy = 0; dy < kh; ++dy)
            for (std::size_t dx = 0; dx < kw; ++dx)
              acc += in.at((ch * h + y + dy) * w + x + dx) * k.at(((q * c + ch) * kh + dy) * kw + dx);
        out[(q * oh + y) * ow + x] = acc;
      }
  return out;
}

}  // namespace

TEST(Tensor, ShapeAndValuesAgree) {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_THROW(Tensor({2, 3}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  EXPECT_EQ(Tensor({4}).numel(), 4u);
}

TEST(Randn, DeterministicPerSeed) {
  auto a = randn({2, 2}, 7, 1.0);
  auto b = randn({2, 2}, 7, 1.0);
  auto c = randn({2, 2}, 8, 1.0);
  EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
  EXPECT_FALSE(std::equal(a.values().begin(), a.values().end(), c.values().begin()));
}

TEST(Randn, ZeroScaleGivesZeros) {
  const auto t = randn({3}, 1, 0.0);
  for (double v : t.values()) EXPECT_EQ(v, 0.0);
}

TEST(Randn, SampleMeanNearZero) {
  const auto t = randn({100000}, 3, 1.0);
  double s = 0.0, ss = 0.0;
  for (double v : t.values()) {
    s += v;
    ss += v * v;
  }
  const double mean = s / 1e5;
  EXPECT_LT(std::abs(mean), 0.02);
  EXPECT_NEAR(ss / 1e5 - mean * mean, 1.0, 0.02);
}

TEST(Randn, RejectsBadArguments) {
  EXPECT_THROW(randn({2, 0}, 1), ShapeError);
  EXPECT_THROW(randn({}, 1), ShapeError);
  EXPECT_THROW(randn({2}, 1, -1.0), ConfigError);
}

TEST(Matmul, HandExample) {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2, 1}, {1, 1});
  const auto c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(c.at(0), 3.0);
  EXPECT_EQ(c.at(1), 7.0);
}

TEST(Matmul, IdentityIsNeutral) {
  Rng rng(11);
  const auto a = uniform_tensor(rng, {3, 4}, -2, 2);
  Tensor eye({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye.mutable_values()[i * 5] = 1.0;
  const auto c = matmul(a, eye);
  EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), c.values().begin()));
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({2, 3})), ShapeError);
  EXPECT_THROW(matmul(Tensor({6}), Tensor({6, 1})), ShapeError);
}

TEST(Conv2d, HandExample) {
  Tensor in({1, 2, 2}, {1, 2, 3, 4});
  Tensor k({1, 1, 2, 2}, {1, 0, 0, 1});
  const auto out = conv2d(in, k, Tensor({1}));
  ASSERT_EQ(out.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(out.item(), 5.0);
}

TEST(Conv2d, UnitKernelSumsChannels) {
  Rng rng(5);
  const auto in = uniform_tensor(rng, {3, 4, 5}, -1, 1);
  const auto out = conv2d(in, Tensor::full({1, 3, 1, 1}, 1.0), Tensor({1}));
  ASSERT_EQ(out.shape(), (Shape{1, 4, 5}));
  for (std::size_t i = 0; i < 20; ++i) {
    EXPECT_DOUBLE_EQ(out.at(i), in.at(i) + in.at(20 + i) + in.at(40 + i));
  }
}

TEST(Conv2d, MatchesNaiveDefinition) {
  Rng rng(21);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t c = 1 + rng.below(3), o = 1 + rng.below(3), kh = 1 + rng.below(3), kw = 1 + rng.below(3);
    const auto in = uniform_tensor(rng, {c, kh + rng.below(5), kw + rng.below(5)}, -1, 1);
    const auto k = uniform_tensor(rng, {o, c, kh, kw}, -1, 1);
    const auto b = uniform_tensor(rng, {o}, -1, 1);
    const auto got = conv2d(in, k, b);
    const auto want = naive_conv(in, k, b);
    ASSERT_EQ(got.numel(), want.size());
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got.at(i), want[i], 1e-12);
  }
}

TEST(Conv2d, KernelLargerThanInputThrows) {
  EXPECT_THROW(conv2d(Tensor({1, 2, 2}), Tensor({1, 1, 3, 3}), Tensor({1})), ShapeError);
  EXPECT_THROW(conv2d(Tensor({2, 4, 4}), Tensor({1, 1, 3, 3}), Tensor({1})), ShapeError);
  EXPECT_THROW(conv2d(Tensor({1, 4, 4}), Tensor({2, 1, 3, 3}), Tensor({1})), ShapeError);
}

TEST(Elementwise, ReluValuesAndSubgradientAtZero) {
  Tensor x({3}, {-1, 0, 2}, true);
  const auto y = relu(x);
  EXPECT_EQ(y.at(0), 0.0);
  EXPECT_EQ(y.at(1), 0.0);
  EXPECT_EQ(y.at(2), 2.0);
  backward(sum(y));
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 0.0);
  EXPECT_EQ(x.grad()[2], 1.0);
}

TEST(Elementwise, GlobalAvgPoolOfConstantChannel) {
  Tensor x = Tensor::full({2, 3, 3}, 4.5);
  const auto y = global_avg_pool(x);
  ASSERT_EQ(y.shape(), (Shape{2}));
  EXPECT_EQ(y.at(0), 4.5);
  EXPECT_EQ(y.at(1), 4.5);
}

TEST(Elementwise, AddBroadcastsBiasOverRowsOnly) {
  Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b({3}, {10, 20, 30});
  const auto c = add(a, b);
  EXPECT_EQ(c.at(3), 14.0);
  EXPECT_THROW(add(a, Tensor({2})), ShapeError);
  EXPECT_THROW(add(a, Tensor({3, 2})), ShapeError);
  EXPECT_THROW(mul(a, Tensor({3, 2})), ShapeError);
}

TEST(Elementwise, ScaleAndFlatten) {
  Tensor x({2, 2}, {1, -2, 3, -4});
  const auto y = flatten(scale(x, -0.5));
  ASSERT_EQ(y.shape(), (Shape{1, 4}));
  EXPECT_EQ(y.at(1), 1.0);
}

TEST(Backward, SumGivesOnes) {
  Tensor x({4}, {1, 2, 3, 4}, true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, HalfSquaredNormGivesX) {
  Rng rng(2);
  Tensor x = uniform_tensor(rng, {5}, -3, 3, true);
  backward(scale(sum(mul(x, x)), 0.5));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], x.at(i));
}

TEST(Backward, ReusedTensorSumsPaths) {
  Tensor x = Tensor::scalar(3.0, true);
  backward(add(x, x));
  EXPECT_EQ(x.grad()[0], 2.0);
}

TEST(Backward, RepeatedCallsAccumulateUntilZeroGrad) {
  Tensor x({2}, {1, 2}, true);
  const auto loss = sum(scale(x, 3.0));
  backward(loss);
  backward(loss);
  EXPECT_EQ(x.grad()[0], 6.0);
  x.zero_grad();
  EXPECT_FALSE(x.has_grad());
  backward(loss);
  EXPECT_EQ(x.grad()[1], 3.0);
}

TEST(Backward, RejectsNonScalarAndConstantLoss) {
  Tensor x({2}, {1, 2}, true);
  EXPECT_THROW(backward(scale(x, 2.0)), ShapeError);
  EXPECT_THROW(backward(sum(Tensor({2}, {1, 2}))), Error);
}

TEST(Backward, NoGradGuardStopsRecording) {
  Tensor x({2}, {1, 2}, true);
  Tensor y;
  {
    NoGradGuard guard;
    y = sum(x);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(sum(x).requires_grad());
}

TEST(Tape, TopologicalOrder) {
  Rng rng(4);
  Tensor w = uniform_tensor(rng, {3, 2}, -1, 1, true);
  Tensor x = uniform_tensor(rng, {1, 3}, -1, 1);
  Tensor h = matmul(x, w);
  Tensor r = relu(h);
  Tensor loss = sum(add(r, h));
  const auto tape = Tape::record(loss);
  EXPECT_LT(tape.position(w), tape.position(h));
  EXPECT_LT(tape.position(h), tape.position(r));
  EXPECT_LT(tape.position(r), tape.position(loss));
  EXPECT_EQ(tape.position(loss), tape.size() - 1);
}

TEST(Forward, BitIdenticalAcrossRuns) {
  Rng a(9), b(9);
  const auto in1 = uniform_tensor(a, {2, 6, 6}, -1, 1);
  const auto k1 = uniform_tensor(a, {3, 2, 3, 3}, -1, 1);
  const auto in2 = uniform_tensor(b, {2, 6, 6}, -1, 1);
  const auto k2 = uniform_tensor(b, {3, 2, 3, 3}, -1, 1);
  const auto o1 = global_avg_pool(relu(conv2d(in1, k1, Tensor({3}))));
  const auto o2 = global_avg_pool(relu(conv2d(in2, k2, Tensor({3}))));
  EXPECT_TRUE(std::equal(o1.values().begin(), o1.values().end(), o2.values().begin()));
}

// Each op on 20 seeded random instances: backward() vs central differences.
class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, MatchesFiniteDifferences) {
  Rng rng(1000 + GetParam());
  auto a = uniform_tensor(rng, {3, 4}, -1, 1, true);
  auto b = uniform_tensor(rng, {4, 2}, -1, 1, true);
  auto bias = uniform_tensor(rng, {2}, -1, 1, true);
  auto in = uniform_tensor(rng, {2, 5, 5}, -1, 1, true);
  auto k = uniform_tensor(rng, {3, 2, 3, 3}, -1, 1, true);
  auto kb = uniform_tensor(rng, {3}, -1, 1, true);
  auto m = uniform_tensor(rng, {3, 4}, -1, 1, true);
  const auto w32 = uniform_tensor(rng, {3, 2}, -1, 1);

  EXPECT_LT(gradient_check({a, b}, [&] { return sum(mul(matmul(a, b), w32)); }).max_rel_error, 1e-6);
  EXPECT_LT(gradient_check({a, b, bias}, [&] { return sum(mul(add(matmul(a, b), bias), w32)); }).max_rel_error, 1e-6);
  const auto wconv = Tensor({3, 3, 3}, testkit::uniform_values(rng, 27, -1, 1));
  EXPECT_LT(gradient_check({in, k, kb}, [&] { return sum(mul(conv2d(in, k, kb), wconv)); }).max_rel_error, 1e-6);
  EXPECT_LT(gradient_check({a, m}, [&] { return sum(mul(a, m)); }).max_rel_error, 1e-6);
  EXPECT_LT(gradient_check({a}, [&] { return sum(scale(a, -1.7)); }).max_rel_error, 1e-6);
  const auto wflat = Tensor({1, 12}, testkit::uniform_values(rng, 12, -1, 1));
  EXPECT_LT(gradient_check({a}, [&] { return sum(mul(flatten(a), wflat)); }).max_rel_error, 1e-6);
  const auto wpool = Tensor({2}, {0.3, -1.1});
  EXPECT_LT(gradient_check({in}, [&] { return sum(mul(global_avg_pool(in), wpool)); }).max_rel_error, 1e-6);
  // Inputs away from the kink at 0 so differences stay on one side.
  for (double& v : m.mutable_values()) v = (v < 0 ? -0.1 : 0.1) + v;
  EXPECT_LT(gradient_check({m}, [&] { return sum(mul(relu(m), a.detach())); }).max_rel_error, 1e-6);
  EXPECT_LT(gradient_check({a}, [&] { return scale(element(flatten(a), 5), 2.0); }).max_rel_error, 1e-6);
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradient, ::testing::Range(0, 20));
