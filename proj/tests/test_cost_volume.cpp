#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fastmvs/cost_volume.hpp"

using namespace fastmvs;

namespace {

CameraView camera_at(double x, double f, std::size_t size) {
  CameraView v;
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  v.intrinsics = Intrinsics(f, f, c, c);
  v.pose = Pose(Mat3::Identity(), Vec3(-x, 0.0, 0.0));
  v.depth_range = DepthRange(400.0, 800.0);
  return v;
}

// Smooth texture on the plane z = depth, sampled through a camera translated
// along x with identity rotation. Frequencies stay well below one radian per
// pixel so bilinear sampling tracks the texture.
Tensor plane_features(double cam_x, double depth, double f, std::size_t size) {
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  Tensor t({3, size, size});
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double wx = cam_x + (static_cast<double>(x) - c) / f * depth;
      const double wy = (static_cast<double>(y) - c) / f * depth;
      t(0, y, x) = std::sin(0.05 * wx) + std::cos(0.03 * wy);
      t(1, y, x) = std::sin(0.04 * wx + 0.02 * wy);
      t(2, y, x) = std::cos(0.013 * wx - 0.045 * wy);
    }
  return t;
}

}  // namespace

TEST(Hypotheses, Endpoints) {
  const DepthRange r(425.0, 921.0);
  EXPECT_EQ(sample_hypotheses(r, 2).values, (std::vector<double>{425.0, 921.0}));
  EXPECT_EQ(sample_hypotheses(r, 3).values, (std::vector<double>{425.0, 673.0, 921.0}));
  const auto h = sample_hypotheses(r, 48);
  EXPECT_NEAR(h.values[1] - h.values[0], 496.0 / 47.0, 1e-12);
  EXPECT_NEAR(h.values[1] - h.values[0], 10.553, 1e-3);
  EXPECT_EQ(h.values.back(), 921.0);
  EXPECT_THROW(sample_hypotheses(r, 1), Error);
}

TEST(CostVolume, IdenticalViewsHaveZeroVariance) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  Tensor f({4, 8, 8});
  for (double& v : f.storage()) v = u(rng);
  const CameraView cam = camera_at(0.0, 10.0, 8);
  Tape tape;
  const CostVolume cv = build_sparse_cost_volume(tape.constant(f), {tape.constant(f)}, cam, {cam},
                                                 sample_hypotheses(cam.depth_range, 5));
  EXPECT_EQ(cv.data.value().shape(), (Shape{4, 5, 4, 4}));
  for (double v : cv.data.value().values()) EXPECT_NEAR(v, 0.0, 1e-24);
}

TEST(CostVolume, ThreeViewVarianceByHand) {
  const CameraView cam = camera_at(0.0, 10.0, 8);
  const double r = 0.7, x = -0.2, y = 1.9;
  Tensor ref({1, 8, 8}, r), a({1, 8, 8}, x), b({1, 8, 8}, y);
  Tape tape;
  const CostVolume cv = build_sparse_cost_volume(tape.constant(ref), {tape.constant(a), tape.constant(b)}, cam,
                                                 {cam, cam}, sample_hypotheses(cam.depth_range, 2));
  const double m = (r + x + y) / 3.0;
  const double expected = ((x - m) * (x - m) + (y - m) * (y - m) + (r - m) * (r - m)) / 3.0;
  EXPECT_NEAR(cv.data.value()(0, 1, 2, 3), expected, 1e-15);
}

TEST(CostVolume, PlaneArgminAtNearestHypothesis) {
  const std::size_t size = 64;
  const double f = 100.0, baseline = 60.0;
  const CameraView ref = camera_at(0.0, f, size), src = camera_at(baseline, f, size);
  const DepthHypotheses hyps = sample_hypotheses(ref.depth_range, 8);
  for (std::size_t target : {2u, 3u, 5u}) {
    const double d_star = hyps.values[target] + 3.0;
    Tape tape;
    const CostVolume cv = build_sparse_cost_volume(tape.constant(plane_features(0.0, d_star, f, size)),
                                                   {tape.constant(plane_features(baseline, d_star, f, size))},
                                                   ref, {src}, hyps);
    const Tensor& v = cv.data.value();
    const std::size_t cells = cv.grid.cells(), n = hyps.size();
    std::size_t interior = 0, hits = 0;
    for (std::size_t c = 0; c < cells; ++c) {
      bool all = true;
      for (std::size_t j = 0; j < n; ++j) all = all && cv.source_count[j * cells + c] > 0;
      if (!all) continue;
      ++interior;
      std::size_t best = 0;
      double best_cost = INFINITY;
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t ch = 0; ch < 3; ++ch) s += v[(ch * n + j) * cells + c];
        if (s < best_cost) {
          best_cost = s;
          best = j;
        }
      }
      hits += best == target;
    }
    ASSERT_GT(interior, cells / 2);
    EXPECT_GE(static_cast<double>(hits), 0.95 * static_cast<double>(interior)) << "target " << target;
  }
}

TEST(CostVolume, UnseenCellsAreFlagged) {
  CameraView ref = camera_at(0.0, 10.0, 8);
  CameraView behind = ref;
  behind.pose = Pose(Mat3::Identity(), Vec3(0.0, 0.0, -2000.0));  // everything is behind it
  Tape tape;
  const Tensor f({2, 8, 8}, 1.0);
  const CostVolume cv = build_sparse_cost_volume(tape.constant(f), {tape.constant(f)}, ref, {behind},
                                                 sample_hypotheses(ref.depth_range, 3));
  for (auto m : cv.flagged) EXPECT_EQ(m, 1);
  for (double v : cv.data.value().values()) EXPECT_EQ(v, 1.0);
}

TEST(Regularizer, ZeroWeightsGiveUniformProbabilities) {
  ParameterStore store;
  std::mt19937_64 rng(2);
  const CostRegularizer reg(4, {6}, store, rng);
  for (std::size_t i = 0; i < reg.layer_count(); ++i) {
    store[reg.weight_index(i)].value.fill(0.0);
    store[reg.bias_index(i)].value.fill(0.0);
  }
  std::uniform_real_distribution<double> u(0, 1);
  Tensor vol({4, 8, 8, 8});
  for (double& v : vol.storage()) v = u(rng);
  Tape tape;
  const Var p = reg.regularize(tape, store, tape.constant(vol));
  ASSERT_EQ(p.value().shape(), (Shape{8, 8, 8}));
  for (double v : p.value().values()) EXPECT_NEAR(v, 1.0 / 8.0, 1e-15);
}

TEST(SoftArgmax, OneHotUniformAndHalfHalf) {
  const DepthHypotheses hyps = sample_hypotheses(DepthRange(425.0, 921.0), 5);
  const SparseGrid grid{4, 4, 0, 0};
  Tape tape;
  Tensor one_hot({5, 2, 2});
  for (std::size_t c = 0; c < 4; ++c) one_hot[c % 5 * 4 + c] = 1.0;
  const SparseDepthMap a = soft_argmax_depth(tape.constant(one_hot), hyps, grid);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(a.values.value()(2 * (c / 2), 2 * (c % 2)), hyps.values[c % 5]);
  EXPECT_EQ(a.values.value()(1, 1), 0.0);
  EXPECT_EQ(a.mask[0], 1);
  EXPECT_EQ(a.mask[1], 0);

  const SparseDepthMap u = soft_argmax_depth(tape.constant(Tensor({5, 2, 2}, 0.2)), hyps, grid);
  EXPECT_NEAR(u.values.value()(0, 0), 673.0, 1e-9);

  const DepthHypotheses two = sample_hypotheses(DepthRange(425.0, 921.0), 2);
  const SparseDepthMap h = soft_argmax_depth(tape.constant(Tensor({2, 2, 2}, 0.5)), two, grid);
  EXPECT_DOUBLE_EQ(h.values.value()(2, 2), 673.0);
  EXPECT_DOUBLE_EQ(h.confidence(2, 2), 1.0);
}

TEST(SoftArgmax, ConfidenceIsMassOfNearestFour) {
  const DepthHypotheses hyps = sample_hypotheses(DepthRange(0.0 + 100.0, 800.0), 8);
  Tensor p({8, 1, 1});
  p[7] = 1.0;  // all mass on the last plane
  Tape tape;
  const SparseDepthMap a = soft_argmax_depth(tape.constant(p), hyps, SparseGrid{1, 1, 0, 0});
  EXPECT_DOUBLE_EQ(a.confidence[0], 1.0);
  Tensor q({8, 1, 1}, 1.0 / 8.0);
  const SparseDepthMap b = soft_argmax_depth(tape.constant(q), hyps, SparseGrid{1, 1, 0, 0});
  EXPECT_NEAR(b.confidence[0], 0.5, 1e-12);
}
