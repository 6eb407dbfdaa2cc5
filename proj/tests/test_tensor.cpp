#include <gtest/gtest.h>

#include <chrono>
#include <cmath>

#include "gradcheck.hpp"
#include "lesionforge/adam.hpp"
#include "lesionforge/layers.hpp"
#include "lesionforge/losses.hpp"

using namespace lesionforge;
using lesionforge::oracle::random_tensor;
using Tensor64 = Tensor<double>;
using Tensor32 = Tensor<float>;

namespace {

// Straight nested-loop convolution used as the oracle for conv2d.
std::vector<double> naive_conv(const Tensor64& x, const Tensor64& w, const Tensor64& b, std::size_t stride,
                               std::size_t pad) {
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t ho = (h + 2 * pad - kh) / stride + 1, wo = (wd + 2 * pad - kw) / stride + 1;
  std::vector<double> out(n * cout * ho * wo, 0.0);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          double acc = b[o];
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t ky = 0; ky < kh; ++ky)
              for (std::size_t kx = 0; kx < kw; ++kx) {
                long iy = long(oy * stride + ky) - long(pad), ix = long(ox * stride + kx) - long(pad);
                if (iy < 0 || ix < 0 || iy >= long(h) || ix >= long(wd)) continue;
                acc += x[((s * cin + c) * h + iy) * wd + ix] * w[((o * cin + c) * kh + ky) * kw + kx];
              }
          out[((s * cout + o) * ho + oy) * wo + ox] = acc;
        }
  return out;
}

}  // namespace

TEST(Tensor, RejectsMismatchedElementCount) {
  EXPECT_THROW(Tensor32({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor32({0, 2}, {}), ShapeError);
}

TEST(Tensor, FiniteChecksCatchNaN) {
  bool saved = finite_checks_enabled();
  finite_checks_enabled() = true;
  Tensor32 a({1}, {-1.0f});
  EXPECT_THROW(Tensor32({1}, {std::nanf("")}), NonFiniteError);
  EXPECT_THROW(scale(a, std::numeric_limits<float>::infinity()), NonFiniteError);
  finite_checks_enabled() = saved;
}

TEST(Conv2d, ScalingKernel) {
  Tensor32 x({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor32 w({1, 1, 1, 1}, {2});
  Tensor32 b({1}, {0});
  auto y = conv2d(x, w, b, 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_EQ(std::vector<float>(y.data().begin(), y.data().end()), (std::vector<float>{2, 4, 6, 8}));
}

TEST(Conv2d, IdentityKernelWithPadding) {
  Rng rng = make_rng(3);
  auto x = random_tensor({2, 1, 5, 4}, rng);
  Tensor64 w({1, 1, 3, 3}, {0, 0, 0, 0, 1, 0, 0, 0, 0});
  auto y = conv2d(x, w, Tensor64::zeros({1}), 1, 1);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Conv2d, DiagonalKernelMatchesNaiveOracle) {
  Tensor64 x({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor64 w({1, 1, 2, 2}, {1, 0, 0, 1});
  Tensor64 b({1}, {0});
  auto oracle = naive_conv(x, w, b, 1, 0);
  ASSERT_EQ(oracle, std::vector<double>{5});
  auto y = conv2d(x, w, b, 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(y[0], 5.0);
}

TEST(Conv2d, RandomCasesMatchNaiveOracle) {
  Rng rng = make_rng(11);
  struct Case { Shape x; Shape w; std::size_t stride, pad; };
  for (Case c : {Case{{2, 3, 6, 5}, {4, 3, 3, 3}, 1, 1}, Case{{1, 2, 8, 8}, {3, 2, 4, 4}, 2, 1},
                 Case{{3, 1, 7, 7}, {2, 1, 3, 3}, 2, 0}, Case{{1, 4, 4, 4}, {5, 4, 1, 1}, 1, 0}}) {
    auto x = random_tensor(c.x, rng), w = random_tensor(c.w, rng), b = random_tensor({c.w[0]}, rng);
    auto expected = naive_conv(x, w, b, c.stride, c.pad);
    auto y = conv2d(x, w, b, c.stride, c.pad);
    ASSERT_EQ(y.size(), expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(y[i], expected[i], 1e-12);
  }
}

TEST(Conv2d, OutputExtentFormula) {
  auto y = conv2d(Tensor32::zeros({1, 1, 7, 9}), Tensor32::zeros({1, 1, 3, 3}), Tensor32::zeros({1}), 2, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 4, 5}));
}

TEST(Conv2d, ShapeErrors) {
  auto x = Tensor32::zeros({1, 2, 4, 4});
  EXPECT_THROW(conv2d(x, Tensor32::zeros({1, 3, 3, 3}), Tensor32::zeros({1}), 1, 1), ShapeError);
  EXPECT_THROW(conv2d(x, Tensor32::zeros({1, 2, 7, 7}), Tensor32::zeros({1}), 1, 1), ShapeError);
  EXPECT_THROW(conv2d(x, Tensor32::zeros({2, 2, 3, 3}), Tensor32::zeros({1}), 1, 1), ShapeError);
}

TEST(Dense, IdentityAndSummation) {
  Tensor32 x({2, 2}, {1, 2, 3, 4});
  auto y = dense(x, Tensor32({2, 2}, {1, 0, 0, 1}), Tensor32::zeros({2}));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(y[i], x[i]);
  auto s = dense(Tensor32({1, 2}, {1, 2}), Tensor32({2, 1}, {1, 1}), Tensor32({1}, {0}));
  EXPECT_EQ(s.shape(), (Shape{1, 1}));
  EXPECT_EQ(s[0], 3.0f);
}

TEST(Dense, MatchesTripleLoop) {
  Rng rng = make_rng(5);
  auto x = random_tensor({3, 4}, rng), w = random_tensor({4, 2}, rng), b = random_tensor({2}, rng);
  auto y = dense(x, w, b);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 2; ++k) {
      double acc = b[k];
      for (std::size_t j = 0; j < 4; ++j) acc += x[i * 4 + j] * w[j * 2 + k];
      EXPECT_NEAR(y[i * 2 + k], acc, 1e-14);
    }
  EXPECT_THROW(dense(x, random_tensor({3, 2}, rng), b), ShapeError);
}

TEST(Activations, LeakyRelu) {
  auto y = leaky_relu(Tensor32({3}, {1.0f, -1.0f, 0.0f}));
  EXPECT_EQ(y[0], 1.0f);
  EXPECT_FLOAT_EQ(y[1], -0.2f);
  EXPECT_EQ(y[2], 0.0f);
}

TEST(Activations, Tanh) {
  Tensor64 x({4}, {0.0, 30.0, -30.0, 0.5}, true);
  auto y = tanh_act(x);
  EXPECT_EQ(y[0], 0.0);
  for (double v : y.data()) EXPECT_LE(std::abs(v), 1.0);
  EXPECT_LT(std::abs(tanh_act(Tensor32({1}, {3.0f}))[0]), 1.0f);
  sum(y).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
}

TEST(Resampling, UpsampleReplicates) {
  auto one = upsample2x_nearest(Tensor32({1, 1, 1, 1}, {1}));
  EXPECT_EQ(std::vector<float>(one.data().begin(), one.data().end()), (std::vector<float>{1, 1, 1, 1}));
  auto y = upsample2x_nearest(Tensor32({1, 1, 2, 2}, {1, 2, 3, 4}));
  std::vector<float> expected{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  EXPECT_EQ(std::vector<float>(y.data().begin(), y.data().end()), expected);
}

TEST(Resampling, DownsampleAverages) {
  auto c = downsample2x_avg(Tensor32::full({1, 2, 4, 4}, 0.37f));
  for (float v : c.data()) EXPECT_EQ(v, 0.37f);
  auto m = downsample2x_avg(Tensor32({1, 1, 2, 2}, {0, 2, 4, 6}));
  EXPECT_EQ(m[0], 3.0f);
  EXPECT_THROW(downsample2x_avg(Tensor32::zeros({1, 1, 3, 4})), ShapeError);
}

TEST(Resampling, DownsampleRampMatchesBlockMeans) {
  std::vector<double> ramp(16);
  for (int i = 0; i < 16; ++i) ramp[i] = i;
  auto y = downsample2x_avg(Tensor64({1, 1, 4, 4}, ramp));
  for (int by = 0; by < 2; ++by)
    for (int bx = 0; bx < 2; ++bx) {
      double acc = 0;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) acc += ramp[(2 * by + dy) * 4 + 2 * bx + dx];
      EXPECT_DOUBLE_EQ(y[by * 2 + bx], acc / 4);
    }
}

TEST(Resampling, DownOfUpIsExactIdentity) {
  Rng rng = make_rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<float> v(2 * 3 * 5 * 7);
    fill_uniform<float>(v, rng, -1.f, 1.f);
    Tensor32 x({2, 3, 5, 7}, v);
    auto back = downsample2x_avg(upsample2x_nearest(x));
    for (std::size_t i = 0; i < x.size(); ++i) ASSERT_EQ(back[i], x[i]);
  }
}

TEST(PixelNorm, ConstantAndZeroVectors) {
  auto y = pixelnorm(Tensor32::full({1, 4, 2, 2}, 3.0f));
  for (float v : y.data()) EXPECT_NEAR(v, 1.0f, 1e-6);
  auto z = pixelnorm(Tensor32::zeros({1, 4, 2, 2}));
  for (float v : z.data()) EXPECT_EQ(v, 0.0f);
}

TEST(PixelNorm, UnitRootMeanSquare) {
  Rng rng = make_rng(4);
  auto x = random_tensor({3, 5, 3, 3}, rng);
  auto y = pixelnorm(x);
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t p = 0; p < 9; ++p) {
      double acc = 0;
      for (std::size_t c = 0; c < 5; ++c) acc += y[(s * 5 + c) * 9 + p] * y[(s * 5 + c) * 9 + p];
      EXPECT_NEAR(std::sqrt(acc / 5), 1.0, 1e-3);
    }
}

TEST(MinibatchStddev, IdenticalSamplesGiveZeroChannel) {
  std::vector<float> one{0.1f, -0.4f, 0.9f, 0.2f};
  std::vector<float> v;
  for (int i = 0; i < 3; ++i) v.insert(v.end(), one.begin(), one.end());
  auto y = minibatch_stddev(Tensor32({3, 1, 2, 2}, v));
  ASSERT_EQ(y.shape(), (Shape{3, 2, 2, 2}));
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t p = 0; p < 4; ++p) EXPECT_EQ(y[(s * 2 + 1) * 4 + p], 0.0f);
}

TEST(MinibatchStddev, SymmetricPairGivesPopulationStd) {
  std::vector<double> v(2 * 2 * 3 * 3);
  std::fill(v.begin(), v.begin() + 18, 0.7);
  std::fill(v.begin() + 18, v.end(), -0.7);
  auto y = minibatch_stddev(Tensor64({2, 2, 3, 3}, v));
  EXPECT_EQ(y.shape(), (Shape{2, 3, 3, 3}));
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t p = 0; p < 9; ++p) EXPECT_DOUBLE_EQ(y[(s * 3 + 2) * 9 + p], 0.7);
}

TEST(Backward, SumAndSquare) {
  Tensor64 w({3}, {1, 2, 3}, true);
  sum(w).backward();
  for (double g : w.grad()) EXPECT_EQ(g, 1.0);
  Tensor64 u({1}, {3}, true);
  sum(square(u)).backward();
  EXPECT_EQ(u.grad()[0], 6.0);
}

TEST(Backward, RejectsNonScalar) {
  Tensor64 w({2}, {1, 2}, true);
  EXPECT_THROW(square(w).backward(), ShapeError);
}

// Every op against central differences in double precision.
class GradientCheck : public ::testing::TestWithParam<int> {};

TEST_P(GradientCheck, AllOperations) {
  const std::uint64_t seed = static_cast<std::uint64_t>(GetParam());
  const auto results = oracle::check_every_op(seed);
  EXPECT_EQ(results.size(), 13u);
  for (const auto& [name, r] : results) {
    EXPECT_LT(r.max_rel_error, 1e-4) << name << " seed " << seed;
    EXPECT_GT(r.checked, 0u) << name;
  }
}

INSTANTIATE_TEST_SUITE_P(RandomShapes, GradientCheck, ::testing::Range(0, 20));

TEST(Adam, ZeroGradientLeavesParameterUnchanged) {
  Parameter<float> p{"w", Tensor32({3}, {0.5f, -1.f, 2.f}, true), 3, 1.f};
  OptimizerState<float> opt(AdamConfig::dcgan());
  opt.register_parameter(p);
  p.tensor.mutable_grad();  // zero gradient present
  std::vector<Parameter<float>*> ps{&p};
  adam_step(opt, ps);
  EXPECT_EQ(p.tensor[0], 0.5f);
  EXPECT_EQ(p.tensor[1], -1.f);
  EXPECT_EQ(opt.step(), 1u);
}

TEST(Adam, FirstStepMovesByLearningRateTimesSign) {
  Parameter<double> p{"w", Tensor64({3}, {0.5, -1.0, 2.0}, true), 3, 1.0};
  OptimizerState<double> opt(AdamConfig{1e-3, 0.5, 0.999, 1e-12});
  opt.register_parameter(p);
  auto g = p.tensor.mutable_grad();
  g[0] = 3.0;
  g[1] = -0.25;
  g[2] = 1e-3;
  std::vector<Parameter<double>*> ps{&p};
  adam_step(opt, ps);
  // t = 1: mhat = g, vhat = g^2, so the step is lr * g / |g|.
  EXPECT_NEAR(p.tensor[0], 0.5 - 1e-3, 1e-9);
  EXPECT_NEAR(p.tensor[1], -1.0 + 1e-3, 1e-9);
  EXPECT_NEAR(p.tensor[2], 2.0 - 1e-3, 1e-9);
}

TEST(Adam, EqualizedScaleMultipliesEffectiveStep) {
  Rng rng = make_rng(1);
  auto p = make_weight<double>("w", {4, 2}, 4, InitScheme::kEqualized, rng);
  EXPECT_DOUBLE_EQ(p.lr_scale, std::sqrt(2.0 / 4));
  std::vector<double> before(p.tensor.data().begin(), p.tensor.data().end());
  OptimizerState<double> opt(AdamConfig{1e-2, 0.0, 0.99, 1e-12});
  opt.register_parameter(p);
  auto x = Tensor64({1, 4}, {1, 1, 1, 1});
  auto b = Parameter<double>{"b", Tensor64::zeros({2}, true), 4, 1.0};
  sum(dense(x, p, b)).backward();
  std::vector<Parameter<double>*> ps{&p};
  adam_step(opt, ps);
  for (std::size_t i = 0; i < before.size(); ++i)
    EXPECT_NEAR((before[i] - p.tensor[i]) * p.lr_scale, 1e-2 * p.lr_scale, 1e-9);
}

TEST(Adam, StepCounterAndErrors) {
  Parameter<float> p{"w", Tensor32({1}, {1.f}, true), 1, 1.f};
  Parameter<float> q{"q", Tensor32({1}, {1.f}, true), 1, 1.f};
  OptimizerState<float> opt;
  opt.register_parameter(p);
  std::vector<Parameter<float>*> ps{&p};
  EXPECT_THROW(adam_step(opt, ps), ArgumentError);  // no gradient yet
  p.tensor.mutable_grad()[0] = 1.f;
  for (int i = 0; i < 3; ++i) adam_step(opt, ps);
  EXPECT_EQ(opt.step(), 3u);
  q.tensor.mutable_grad();
  std::vector<Parameter<float>*> qs{&q};
  EXPECT_THROW(adam_step(opt, qs), ArgumentError);  // not registered
}

TEST(Determinism, SameSeedSameBits) {
  auto run = [] {
    Rng rng = make_rng(77);
    auto w = make_weight<float>("w", {8, 3, 3, 3}, 27, InitScheme::kNormal002, rng);
    std::vector<float> xv(2 * 3 * 8 * 8);
    fill_normal<float>(xv, rng);
    auto y = pixelnorm(leaky_relu(conv2d(Tensor32({2, 3, 8, 8}, xv), w.tensor, Tensor32::zeros({8}), 1, 1)));
    return std::vector<float>(y.data().begin(), y.data().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Performance, SixteenChannelConvUnderFiveMilliseconds) {
  Rng rng = make_rng(2);
  std::vector<float> xv(16 * 32 * 32), wv(16 * 16 * 9);
  fill_normal<float>(xv, rng);
  fill_normal<float>(wv, rng);
  Tensor32 x({1, 16, 32, 32}, xv), w({16, 16, 3, 3}, wv), b = Tensor32::zeros({16});
  conv2d(x, w, b, 1, 1);  // warm-up
  const int reps = 20;
  auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) conv2d(x, w, b, 1, 1);
  double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count() / reps;
  RecordProperty("conv_ms", std::to_string(ms));
  EXPECT_LT(ms, 5.0);
}
