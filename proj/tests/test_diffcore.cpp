// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "efps/diffcore/checkpoint.hpp"
#include "efps/diffcore/layers.hpp"
#include "efps/diffcore/optim.hpp"
#include "support/gradient_suite.hpp"

using namespace efps;
using namespace efps::diff;
using efps::testing::TensorD;

namespace {

template <typename F>
std::string error_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

// Direct nested-loop cross-correlation with zero padding.
TensorD reference_conv(const TensorD& x, const TensorD& w, const TensorD& b, int stride, int pad) {
  const int n = x.n(), cin = x.c(), h = x.h(), wd = x.w();
  const int cout = w.dim(0), k = w.dim(2);
  const int ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
  TensorD y({n, cout, ho, wo});
  for (int i = 0; i < n; ++i)
    for (int o = 0; o < cout; ++o)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          double s = b.data[o];
          for (int c = 0; c < cin; ++c)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
                if (iy < 0 || ix < 0 || iy >= h || ix >= wd) continue;
                s += x(i, c, iy, ix) * w(o, c, ky, kx);
              }
          y.data[((static_cast<std::size_t>(i) * cout + o) * ho + oy) * wo + ox] = s;
        }
  return y;
}

}  // namespace

TEST(Conv2d, IdentityPointwise) {
  Conv2d<double> conv(3, 3, 1);
  for (int c = 0; c < 3; ++c) conv.weight().data[c * 3 + c] = 1.0;
  Rng rng(1);
  const TensorD x = efps::testing::random_tensor({2, 3, 4, 5}, rng);
  EXPECT_EQ(conv.forward(x, Mode::kTrain).data, x.data);
}

TEST(Conv2d, ZeroWeightsGiveZero) {
  Conv2d<double> conv(2, 3, 3, 1, 1);
  Rng rng(2);
  const TensorD y = conv.forward(efps::testing::random_tensor({1, 2, 5, 5}, rng), Mode::kTrain);
  for (double v : y.data) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, OnesSumToNine) {
  Conv2d<double> conv(1, 1, 3);
  std::fill(conv.weight().data.begin(), conv.weight().data.end(), 1.0);
  const TensorD y = conv.forward(TensorD({1, 1, 3, 3}, 1.0), Mode::kTrain);
  ASSERT_EQ(y.shape, (std::vector<int>{1, 1, 1, 1}));
  EXPECT_EQ(y.data[0], 9.0);
}

TEST(Conv2d, OutputExtent) {
  Conv2d<double> conv(1, 1, 5, 2, 2);
  EXPECT_EQ(conv.out_extent(16), 8);
  EXPECT_EQ(conv.out_extent(7), 4);
  const TensorD y = conv.forward(TensorD({1, 1, 7, 16}), Mode::kTrain);
  EXPECT_EQ(y.shape, (std::vector<int>{1, 1, 4, 8}));
}

TEST(Conv2d, MatchesNestedLoopReference) {
  Rng rng(3);
  for (int trial = 0; trial < 60; ++trial) {
    const int k = std::array{1, 3, 5}[rng.below(3)];
    const int stride = 1 + static_cast<int>(rng.below(2));
    const int pad = static_cast<int>(rng.below(static_cast<std::uint64_t>(k / 2 + 2)));
    const int h = std::max(k - 2 * pad, 1 + static_cast<int>(rng.below(9)));
    const int w = std::max(k - 2 * pad, 1 + static_cast<int>(rng.below(9)));
    const int n = 1 + static_cast<int>(rng.below(2)), cin = 1 + static_cast<int>(rng.below(4));
    Conv2d<double> conv(cin, 1 + static_cast<int>(rng.below(4)), k, stride, pad);
    conv.init(rng);
    for (auto& v : conv.bias().data) v = rng.normal();
    const TensorD x = efps::testing::random_normal_tensor({n, cin, h, w}, rng);
    const TensorD y = conv.forward(x, Mode::kTrain);
    const TensorD ref = reference_conv(x, conv.weight(), conv.bias(), stride, pad);
    ASSERT_EQ(y.shape, ref.shape);
    for (std::size_t i = 0; i < y.size(); ++i) ASSERT_NEAR(y.data[i], ref.data[i], 1e-12);
  }
}

TEST(Conv2d, LargeBatchesAreChunkedConsistently) {
  // Enough samples to split the batch across several column buffers.
  Rng rng(4);
  Conv2d<double> conv(8, 4, 3, 1, 1);
  conv.init(rng);
  const TensorD x = efps::testing::random_normal_tensor({300, 8, 8, 8}, rng);
  const TensorD y = conv.forward(x, Mode::kTrain);
  TensorD one({1, 8, 8, 8});
  for (int i : {0, 137, 299}) {
    std::copy(x.data.begin() + i * 512, x.data.begin() + (i + 1) * 512, one.data.begin());
    const TensorD ref = reference_conv(one, conv.weight(), conv.bias(), 1, 1);
    for (std::size_t k = 0; k < ref.size(); ++k) ASSERT_NEAR(y.data[i * 256 + k], ref.data[k], 1e-12);
  }
}

TEST(Conv2d, ShapeErrors) {
  Conv2d<double> conv(3, 2, 3);
  const std::string msg = error_of([&] { conv.forward(TensorD({1, 2, 5, 5}), Mode::kTrain); });
  EXPECT_NE(msg.find("expected 3 input channels"), std::string::npos);
  EXPECT_NE(msg.find("[1x2x5x5]"), std::string::npos) << msg;
  EXPECT_THROW(conv.forward(TensorD({1, 3, 2, 2}), Mode::kTrain), Error);
  EXPECT_THROW(conv.forward(TensorD({3, 5, 5}), Mode::kTrain), Error);
}

TEST(BatchNorm, HandExample) {
  BatchNorm2d<double> bn(1, 0.0);
  bn.gamma().data[0] = 2.0;
  bn.beta().data[0] = 3.0;
  TensorD x({2, 1, 1, 1});
  x.data = {-1.0, 1.0};
  const TensorD y = bn.forward(x, Mode::kTrain);
  EXPECT_DOUBLE_EQ(y.data[0], 1.0);
  EXPECT_DOUBLE_EQ(y.data[1], 5.0);
}

TEST(BatchNorm, ConstantInputGivesZero) {
  BatchNorm2d<double> bn(2);
  const TensorD y = bn.forward(TensorD({3, 2, 2, 2}, 4.5), Mode::kTrain);
  for (double v : y.data) EXPECT_EQ(v, 0.0);
}

TEST(BatchNorm, StandardizedInputIsNearlyUnchanged) {
  BatchNorm2d<double> bn(1);
  TensorD x({4, 1, 1, 1});
  x.data = {-1.0, 1.0, -1.0, 1.0};  // mean 0, population variance 1
  const TensorD y = bn.forward(x, Mode::kTrain);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y.data[i], x.data[i], 1e-5);
}

TEST(BatchNorm, TrainOutputStatistics) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    BatchNorm2d<double> bn(3, 0.0);
    const TensorD x = efps::testing::random_normal_tensor({4, 3, 3, 5}, rng);
    const TensorD y = bn.forward(x, Mode::kTrain);
    for (int c = 0; c < 3; ++c) {
      double s = 0.0, s2 = 0.0;
      int count = 0;
      for (int i = 0; i < 4; ++i)
        for (int k = 0; k < 15; ++k) {
          const double v = y.data[(i * 3 + c) * 15 + k];
          s += v;
          s2 += v * v;
          ++count;
        }
      const double mean = s / count;
      EXPECT_LT(std::abs(mean), 1e-9);
      EXPECT_NEAR(s2 / count - mean * mean, 1.0, 1e-6);
    }
  }
}

TEST(BatchNorm, RunningStatisticsAndEvalMode) {
  BatchNorm2d<double> bn(1);
  TensorD x({2, 1, 1, 2});
  x.data = {1.0, 2.0, 3.0, 6.0};  // mean 3, population variance 3.5, unbiased 14/3
  bn.forward(x, Mode::kTrain);
  EXPECT_NEAR(bn.running_mean().data[0], 0.3, 1e-12);
  EXPECT_NEAR(bn.running_var().data[0], 0.9 + 0.1 * 14.0 / 3.0, 1e-12);

  TensorD one({1, 1, 1, 1});
  one.data = {2.0};
  const double expected = (2.0 - 0.3) / std::sqrt(bn.running_var().data[0] + 1e-5);
  EXPECT_NEAR(bn.forward(one, Mode::kEval).data[0], expected, 1e-12);
  EXPECT_EQ(error_of([&] { bn.forward(one, Mode::kTrain); }), "batch too small for batch statistics");
}

TEST(Activations, ScalarExamples) {
  EXPECT_EQ(relu(-1.0), 0.0);
  EXPECT_EQ(relu(2.0), 2.0);
  EXPECT_EQ(sigmoid(0.0), 0.5);
  EXPECT_DOUBLE_EQ(leaky_relu(-2.0, 0.1), -0.2);
  EXPECT_NEAR(sigmoid(-800.0), 0.0, 1e-300);
  EXPECT_EQ(sigmoid(800.0), 1.0);
}

TEST(Activations, ReluSubgradientAtZeroIsZero) {
  ReLU<double> r;
  r.forward(TensorD({1, 1, 1, 1}, 0.0), Mode::kTrain);
  EXPECT_EQ(r.backward(TensorD({1, 1, 1, 1}, 1.0)).data[0], 0.0);
}

TEST(Resampling, UpsampleAndPoolValues) {
  TensorD x({1, 1, 2, 2});
  x.data = {1.0, 2.0, 3.0, 4.0};
  Upsample2x<double> up;
  const TensorD u = up.forward(x, Mode::kTrain);
  EXPECT_EQ(u.data, (std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4}));
  AvgPool2x<double> pool;
  EXPECT_EQ(pool.forward(u, Mode::kTrain).data, x.data);
  GlobalAvgPool<double> gap;
  EXPECT_EQ(gap.forward(x, Mode::kTrain).data[0], 2.5);
}

TEST(Adam, ZeroGradientIsNoOp) {
  TensorD p({4});
  p.data = {1.0, -2.0, 0.5, 3.0};
  ParamList<double> params{{"p", &p, true}};
  Adam<double> adam(params);
  p.grad = {0.5, -0.1, 0.2, 1.0};
  adam.step();
  const std::vector<double> after_one = p.data;
  adam.zero_grad();
  for (int i = 0; i < 5; ++i) adam.step();
  EXPECT_EQ(p.data, after_one);
}

TEST(Adam, FirstStepMovesBySignTimesLr) {
  TensorD p({3});
  p.data = {1.0, 1.0, 1.0};
  ParamList<double> params{{"p", &p, true}};
  Adam<double> adam(params, AdamConfig{0.01});
  p.grad = {0.3, -4.0, 1e-3};
  adam.step();
  // m_hat = g and v_hat = g^2 after bias correction.
  EXPECT_NEAR(p.data[0], 1.0 - 0.01 * 0.3 / (0.3 + 1e-8), 1e-15);
  EXPECT_NEAR(p.data[1], 1.0 + 0.01 * 4.0 / (4.0 + 1e-8), 1e-15);
  EXPECT_NEAR(p.data[2], 1.0 - 0.01 * 1e-3 / (1e-3 + 1e-8), 1e-15);
}

TEST(Adam, DescendsQuadratic) {
  TensorD p({1});
  p.data = {1.0};
  ParamList<double> params{{"x", &p, true}};
  Adam<double> adam(params, AdamConfig{0.1});
  double prev = 0.5 * p.data[0] * p.data[0];
  for (int i = 0; i < 2; ++i) {
    p.grad[0] = p.data[0];
    adam.step();
    const double f = 0.5 * p.data[0] * p.data[0];
    EXPECT_LT(f, prev);
    prev = f;
  }
}

TEST(Adam, SkipsFrozenParameters) {
  TensorD a({1}), b({1});
  a.data = {1.0};
  b.data = {1.0};
  ParamList<double> params{{"a", &a, true}, {"b", &b, false}};
  Adam<double> adam(params);
  a.grad = {1.0};
  b.ensure_grad();
  b.grad = {1.0};
  adam.step();
  EXPECT_NE(a.data[0], 1.0);
  EXPECT_EQ(b.data[0], 1.0);
}

TEST(CosineLr, Examples) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 100, 1e-3, 0.0), 1e-3);
  EXPECT_NEAR(cosine_lr(100, 100, 1e-3, 1e-5), 1e-5, 1e-18);
  EXPECT_NEAR(cosine_lr(50, 100, 1e-3, 0.0), 5e-4, 1e-18);
  EXPECT_THROW(cosine_lr(0, 0, 1e-3, 0.0), Error);
  EXPECT_THROW(cosine_lr(101, 100, 1e-3, 0.0), Error);
}

TEST(Checkpoint, RoundTrip) {
  Tensor<float> w({2, 3}), b({2});
  for (std::size_t i = 0; i < w.size(); ++i) w.data[i] = 0.25f * static_cast<float>(i) - 1.0f;
  b.data = {3.5f, -0.125f};
  ParamList<float> params{{"layer.weight", &w, true}, {"layer.bias", &b, true}};
  const auto bytes = encode_checkpoint(make_checkpoint(params, {{"m", "16"}, {"note", "x y"}}));
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "CKPT");
  const Checkpoint ck = decode_checkpoint(bytes);
  EXPECT_EQ(ck.meta.at("note"), "x y");
  ASSERT_EQ(ck.entries.size(), 2u);
  EXPECT_EQ(ck.entries[1].offset, 6u);

  Tensor<float> w2({2, 3}), b2({2});
  ParamList<float> restored{{"layer.weight", &w2, true}, {"layer.bias", &b2, true}};
  restore_checkpoint(ck, restored);
  EXPECT_EQ(w2.data, w.data);
  EXPECT_EQ(b2.data, b.data);
  EXPECT_EQ(encode_checkpoint(ck), bytes);
}

TEST(Checkpoint, MismatchesAreRejected) {
  Tensor<float> w({2, 3});
  ParamList<float> params{{"w", &w, true}};
  const Checkpoint ck = make_checkpoint(params, {});
  Tensor<float> wrong({3, 2});
  ParamList<float> other{{"w", &wrong, true}};
  EXPECT_THROW(restore_checkpoint(ck, other), Error);
  ParamList<float> renamed{{"v", &w, true}};
  EXPECT_THROW(restore_checkpoint(ck, renamed), Error);
  auto bytes = encode_checkpoint(ck);
  bytes.resize(bytes.size() - 2);
  EXPECT_THROW(decode_checkpoint(bytes), Error);
}

TEST(GradientCheck, EveryLayerAndLoss) {
  const auto results = efps::testing::run_gradient_suite(6, 2024);
  for (const auto& r : results) {
    EXPECT_LT(r.report.max_rel, 1e-4) << r.layer << ": " << r.report.worst;
    EXPECT_GT(r.report.probes, 0u) << r.layer;
  }
}

TEST(GradientCheck, ProbesAtReluKinksAreDiscarded) {
  using efps::testing::fd_probe;
  TensorD w({1, 1, 1, 1});
  w.data = {1.0};
  // relu(x) probed exactly at 0, and at a point closer to 0 than the step.
  for (const double x0 : {0.0, 0.3 * efps::testing::kFdStep}) {
    const auto fd = fd_probe(w, [&](double d) {
      TensorD y({1, 1, 1, 1});
      y.data = {std::max(0.0, x0 + d)};
      return y;
    });
    EXPECT_TRUE(fd.straddles_kink) << x0;
  }
  // A smooth function with strong curvature is kept.
  const auto smooth = fd_probe(w, [&](double d) {
    TensorD y({1, 1, 1, 1});
    y.data = {std::exp(3.0 * (0.2 + d))};
    return y;
  });
  EXPECT_FALSE(smooth.straddles_kink);
  EXPECT_NEAR(smooth.central, 3.0 * std::exp(0.6), 1e-8);
}

TEST(GradientCheck, RoundingSlackOnlyCoversRoundoff) {
  using efps::testing::relative_error;
  EXPECT_EQ(relative_error(0.0, 1e-10, 2e-10), 0.0);
  EXPECT_NEAR(relative_error(1.0, 1.1, 1e-10), 0.1 / 1.1, 1e-9);
}
