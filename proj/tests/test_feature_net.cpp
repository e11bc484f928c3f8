#include <gtest/gtest.h>

#include <random>

#include "fastmvs/feature_net.hpp"

using namespace fastmvs;

namespace {

Tensor random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  Tensor t({3, h, w});
  for (double& v : t.storage()) v = u(rng);
  return t;
}

void zero_layer(ParameterStore& store, const ConvNet& net, std::size_t layer, double bias) {
  store[net.weight_index(layer)].value.fill(0.0);
  store[net.bias_index(layer)].value.fill(bias);
}

}  // namespace

TEST(MatchFeatureNet, DeterministicAndQuarterResolution) {
  ParameterStore store;
  std::mt19937_64 rng(1);
  const MatchFeatureNet net(0.5, store, rng);
  const Tensor img = random_image(64, 64, 2);
  Tape tape;
  const Var a = net.extract(tape, store, tape.constant(img));
  const Var b = net.extract(tape, store, tape.constant(img));
  EXPECT_EQ(a.value(), b.value());
  EXPECT_EQ(a.value().shape(), (Shape{net.channels(), 16, 16}));
}

TEST(MatchFeatureNet, ZeroWeightsGiveBias) {
  ParameterStore store;
  std::mt19937_64 rng(1);
  const MatchFeatureNet net(0.25, store, rng);
  for (std::size_t l = 0; l < net.net().layer_count(); ++l) zero_layer(store, net.net(), l, 0.0);
  store[net.net().bias_index(net.net().layer_count() - 1)].value.fill(0.75);
  Tape tape;
  const Var f = net.extract(tape, store, tape.constant(random_image(32, 32, 3)));
  for (double v : f.value().values()) EXPECT_EQ(v, 0.75);
}

TEST(MatchFeatureNet, RejectsSizesNotDivisibleBy8) {
  ParameterStore store;
  std::mt19937_64 rng(1);
  const MatchFeatureNet net(0.25, store, rng);
  Tape tape;
  EXPECT_THROW(net.extract(tape, store, tape.constant(random_image(36, 32, 1))), Error);
}

TEST(PropWeightNet, NormalisedAndShaped) {
  ParameterStore store;
  std::mt19937_64 rng(4);
  const PropWeightNet net(0.5, 3, store, rng);
  Tape tape;
  const Var w = net.predict(tape, store, tape.constant(random_image(64, 64, 5)));
  ASSERT_EQ(w.value().shape(), (Shape{9, 16, 16}));
  for (std::size_t p = 0; p < 256; ++p) {
    double s = 0.0;
    for (std::size_t q = 0; q < 9; ++q) s += w.value()[q * 256 + p];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(PropWeightNet, ZeroFinalLayerIsUniform) {
  ParameterStore store;
  std::mt19937_64 rng(4);
  const PropWeightNet net(0.5, 5, store, rng);
  zero_layer(store, net.net(), net.net().layer_count() - 1, 0.0);
  Tape tape;
  const Var w = net.predict(tape, store, tape.constant(random_image(32, 32, 6)));
  ASSERT_EQ(w.value().dim(0), 25u);
  for (double v : w.value().values()) EXPECT_NEAR(v, 1.0 / 25.0, 1e-15);
  EXPECT_THROW(PropWeightNet(0.5, 4, store, rng), Error);
}

TEST(GNFeatureNet, ChannelCountAtFullWidth) {
  ParameterStore store;
  std::mt19937_64 rng(7);
  const GNFeatureNet net(1.0, store, rng);
  EXPECT_EQ(net.channels(), 48u);
  Tape tape;
  const FeaturePyramid f = net.extract(tape, store, tape.constant(random_image(32, 32, 8)));
  EXPECT_EQ(f.half_res.value().shape(), (Shape{48, 16, 16}));
  EXPECT_EQ(f.quarter_res.value().shape(), (Shape{32, 8, 8}));
}

TEST(GNFeatureNet, ConstantImageGivesConstantInterior) {
  ParameterStore store;
  std::mt19937_64 rng(9);
  const GNFeatureNet net(0.5, store, rng);
  Tape tape;
  const FeaturePyramid f = net.extract(tape, store, tape.constant(Tensor({3, 64, 64}, 0.3)));
  const Tensor& h = f.half_res.value();
  // Zero padding reaches 20 input pixels into Conv_7 (5 quarter-res pixels);
  // half-res rows/cols 12..19 sample quarter-res 6..9.5 only.
  for (std::size_t c = 0; c < h.dim(0); ++c)
    for (std::size_t y = 12; y < 20; ++y)
      for (std::size_t x = 12; x < 20; ++x) EXPECT_NEAR(h(c, y, x), h(c, 16, 16), 1e-12);
}
