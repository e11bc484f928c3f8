#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fastmvs/autodiff.hpp"
#include "fastmvs/gradcheck.hpp"
#include "fastmvs/optim.hpp"

using namespace fastmvs;

namespace {

Tensor random_tensor(const Shape& s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(s);
  for (double& v : t.storage()) v = u(rng);
  return t;
}

// Direct nested-loop convolution with zero padding.
Tensor naive_conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t pad) {
  const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  const std::size_t oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  Tensor out({cout, oh, ow});
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        double s = b[o];
        for (std::size_t c = 0; c < cin; ++c)
          for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j) {
              const long long iy = static_cast<long long>(y * stride + i) - static_cast<long long>(pad);
              const long long ix = static_cast<long long>(xx * stride + j) - static_cast<long long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long long>(h) || ix >= static_cast<long long>(wd)) continue;
              s += w(o, c, i, j) * x(c, iy, ix);
            }
        out(o, y, xx) = s;
      }
  return out;
}

}  // namespace

TEST(Conv2d, MatchesNaiveOracle) {
  std::mt19937_64 rng(1);
  for (std::size_t stride : {1u, 2u}) {
    const Tensor x = random_tensor({3, 9, 8}, rng), w = random_tensor({4, 3, 3, 3}, rng), b = random_tensor({4}, rng);
    Tape tape;
    const Var y = conv2d(tape.constant(x), tape.constant(w), tape.constant(b), stride, 1);
    EXPECT_LE(max_abs_diff(y.value(), naive_conv2d(x, w, b, stride, 1)), 1e-12);
  }
}

TEST(Conv2d, OneByOneIdentityAndZeroWeights) {
  std::mt19937_64 rng(2);
  const Tensor x = random_tensor({2, 5, 5}, rng);
  Tensor w({2, 2, 1, 1});
  w(0, 0, 0, 0) = w(1, 1, 0, 0) = 1.0;
  Tape tape;
  EXPECT_EQ(conv2d(tape.constant(x), tape.constant(w), tape.constant(Tensor({2})), 1, 0).value(), x);

  Tensor b({3});
  b[0] = 0.5;
  b[1] = -2.0;
  b[2] = 3.0;
  const Var y = conv2d(tape.constant(x), tape.constant(Tensor({3, 2, 3, 3})), tape.constant(b), 1, 1);
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t i = 0; i < 25; ++i) EXPECT_EQ(y.value()[o * 25 + i], b[o]);
}

TEST(Conv3d, IdentityAndSumKernel) {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({1, 4, 5, 5}, rng);
  Tensor id({1, 1, 1, 1, 1}, 1.0);
  Tape tape;
  EXPECT_EQ(conv3d(tape.constant(x), tape.constant(id), tape.constant(Tensor({1})), 1, 0).value(), x);

  const double c = 1.75;
  const Var y = conv3d(tape.constant(Tensor({1, 5, 5, 5}, c)), tape.constant(Tensor({1, 1, 3, 3, 3}, 1.0)),
                       tape.constant(Tensor({1})), 1, 1);
  for (std::size_t d = 1; d < 4; ++d)
    for (std::size_t i = 1; i < 4; ++i)
      for (std::size_t j = 1; j < 4; ++j) EXPECT_DOUBLE_EQ(y.value()(0, d, i, j), 27.0 * c);
}

TEST(Softmax, EqualLogitsGiveUniform) {
  Tape tape;
  const Var p = softmax_channel(tape.constant(Tensor({9, 2, 3}, 4.2)));
  for (double v : p.value().values()) EXPECT_NEAR(v, 1.0 / 9.0, 1e-15);
}

TEST(Softmax, ChannelsSumToOneForLargeLogits) {
  std::mt19937_64 rng(4);
  Tape tape;
  const Var p = softmax_channel(tape.constant(random_tensor({5, 3, 3}, rng, -800.0, 800.0)));
  for (std::size_t i = 0; i < 9; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < 5; ++c) s += p.value()[c * 9 + i];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(NearestUpsample, BlockReplicates) {
  Tape tape;
  const Var y = nearest_upsample2x(tape.constant(Tensor({2, 2}, {1, 2, 3, 4})));
  const Tensor expected({4, 4}, {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});
  EXPECT_EQ(y.value(), expected);
}

TEST(BilinearSample, IntegerCoordsAndMidpoint) {
  std::mt19937_64 rng(5);
  const Tensor map = random_tensor({2, 4, 5}, rng);
  Tape tape;
  const Var v = bilinear_sample(tape.constant(map), tape.constant(Tensor({2, 2}, {3, 2, 0, 0})));
  EXPECT_EQ(v.value()(0, 0), map(0, 2, 3));
  EXPECT_EQ(v.value()(1, 1), map(1, 0, 0));

  // Column a = 2, column b = 6, constant along y.
  Tensor ramp({1, 3, 2});
  for (std::size_t y = 0; y < 3; ++y) {
    ramp(0, y, 0) = 2.0;
    ramp(0, y, 1) = 6.0;
  }
  const Var m = bilinear_sample(tape.constant(ramp), tape.constant(Tensor({1, 2}, {0.5, 1.3})));
  EXPECT_DOUBLE_EQ(m.value()[0], 4.0);
}

TEST(L1Loss, ZeroAndConstantOffset) {
  std::mt19937_64 rng(6);
  const Tensor t = random_tensor({3, 4}, rng);
  Mask mask(12, 1);
  mask[5] = 0;
  Tape tape;
  EXPECT_EQ(l1_loss_masked(tape.constant(t), t, mask).value().item(), 0.0);
  Tensor shifted = t;
  for (std::size_t i = 0; i < 12; ++i) shifted[i] += i == 5 ? 100.0 : -0.25;
  EXPECT_NEAR(l1_loss_masked(tape.constant(shifted), t, mask).value().item(), 0.25, 1e-15);
}

TEST(NormalizeChannels, ZeroMeanUnitVariance) {
  std::mt19937_64 rng(7);
  Tape tape;
  const Var y = normalize_channels(tape.constant(random_tensor({3, 4, 6}, rng, 2.0, 9.0)));
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0.0, v = 0.0;
    for (std::size_t i = 0; i < 24; ++i) m += y.value()[c * 24 + i];
    m /= 24.0;
    for (std::size_t i = 0; i < 24; ++i) v += std::pow(y.value()[c * 24 + i] - m, 2);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 24.0, 1.0, 1e-3);
  }
}

TEST(Tape, GradientsAccumulateThroughSharedInputs) {
  Tape tape;
  const Var x = tape.variable(Tensor({2}, {3.0, -1.0}));
  const Var y = sum(add(mul(x, x), scale(x, 2.0)));
  tape.backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 8.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 0.0);
}

TEST(Tape, GradDisabledMakesParametersConstant) {
  ParameterStore store;
  const std::size_t i = store.add("p", Tensor({2}, 1.0));
  Tape tape;
  tape.set_grad_enabled(false);
  const Var p = tape.parameter(store[i]);
  EXPECT_FALSE(p.requires_grad());
}

TEST(GradCheck, SumIsExact) {
  std::mt19937_64 rng(8);
  const auto r = gradient_check([](Tape&, const std::vector<Var>& v) { return sum(v[0]); },
                                {random_tensor({3, 3}, rng)});
  EXPECT_LT(r.max_rel_error, 1e-8);
  EXPECT_EQ(r.checked, 9u);
}

TEST(GradCheck, L1AwayFromTies) {
  std::mt19937_64 rng(9);
  const Tensor target = random_tensor({4, 4}, rng);
  Tensor pred = target;
  for (std::size_t i = 0; i < 16; ++i) pred[i] += (i % 2 ? 0.3 : -0.4);
  const Mask mask(16, 1);
  const auto r = gradient_check(
      [&](Tape&, const std::vector<Var>& v) { return l1_loss_masked(v[0], target, mask); }, {pred});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(GradCheck, ReluKinkIsSkippedNotFailed) {
  const auto r = gradient_check([](Tape&, const std::vector<Var>& v) { return sum(relu(v[0])); },
                                {Tensor({3}, {0.0, 1.0, -1.0})});
  EXPECT_EQ(r.skipped, 1u);
  EXPECT_LT(r.max_rel_error, 1e-8);
}

TEST(RmsProp, ZeroGradientLeavesParameters) {
  ParameterStore store;
  store.add("w", Tensor({3}, {1.0, 2.0, 3.0}));
  rmsprop_step(store, {});
  EXPECT_EQ(store[0].value, Tensor({3}, {1.0, 2.0, 3.0}));
}

TEST(RmsProp, SingleStepClosedForm) {
  ParameterStore store;
  store.add("w", Tensor({1}, 0.0));
  store[0].grad[0] = 1.0;
  const RmsPropConfig cfg{0.0005, 0.9, 1e-8};
  rmsprop_step(store, cfg);
  EXPECT_NEAR(store[0].accumulator[0], 0.1, 1e-16);
  EXPECT_DOUBLE_EQ(store[0].value[0], -0.0005 / (std::sqrt(0.1) + 1e-8));
  EXPECT_EQ(store[0].grad[0], 0.0);
}

TEST(LearningRate, DecaysEveryTwoEpochs) {
  EXPECT_DOUBLE_EQ(scheduled_learning_rate(0.0005, 0.9, 2, 0), 0.0005);
  EXPECT_DOUBLE_EQ(scheduled_learning_rate(0.0005, 0.9, 2, 1), 0.0005);
  EXPECT_DOUBLE_EQ(scheduled_learning_rate(0.0005, 0.9, 2, 4), 0.0005 * 0.9 * 0.9);
}

TEST(Checkpoint, RoundTripIsExact) {
  std::mt19937_64 rng(10);
  std::vector<NamedTensor> entries{{"a.weight", random_tensor({2, 3}, rng)}, {"b", random_tensor({4}, rng)}};
  const auto back = decode_checkpoint(encode_checkpoint(entries), "mem");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].name, "a.weight");
  EXPECT_EQ(back[0].value, entries[0].value);
  EXPECT_EQ(back[1].value, entries[1].value);
}

TEST(Checkpoint, TruncatedFileIsAParseError) {
  std::string bytes = encode_checkpoint({{"w", Tensor({2}, 1.0)}});
  bytes.pop_back();
  EXPECT_THROW(decode_checkpoint(bytes, "mem"), ParseError);
}

TEST(Tensor, ShapeMismatchThrows) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>(3)), Error);
  Tape tape;
  EXPECT_THROW(add(tape.constant(Tensor({2})), tape.constant(Tensor({3}))), Error);
}
