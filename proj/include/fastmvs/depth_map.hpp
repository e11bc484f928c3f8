#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "fastmvs/autodiff.hpp"
#include "fastmvs/camera.hpp"
#include "fastmvs/tensor.hpp"

namespace fastmvs {

/// Dense depth (mm) with validity mask and per-pixel confidence in [0, 1].
struct DepthMap {
  Tensor depth;       // H x W
  Mask mask;          // H*W, nonzero = valid
  Tensor confidence;  // H x W

  DepthMap() = default;

  /// Valid wherever depth > 0; confidence 1.
  explicit DepthMap(Tensor d) : depth(std::move(d)) {
    require_rank(depth, 2, "DepthMap");
    mask.assign(depth.numel(), 0);
    for (std::size_t i = 0; i < depth.numel(); ++i) mask[i] = depth[i] > 0.0 && std::isfinite(depth[i]);
    confidence = Tensor(depth.shape(), 1.0);
  }

  std::size_t height() const { return depth.dim(0); }
  std::size_t width() const { return depth.dim(1); }
  bool valid(std::size_t y, std::size_t x) const { return mask[y * width() + x] != 0; }

  std::size_t valid_count() const {
    std::size_t n = 0;
    for (auto m : mask) n += m != 0;
    return n;
  }
};

/// Mean |a - b| over pixels valid in both maps and with b > 0.
inline double mean_abs_error(const Tensor& estimate, const Tensor& truth) {
  require(estimate.same_shape(truth), ErrorKind::Dimension, "mean_abs_error: shape mismatch");
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < truth.numel(); ++i)
    if (truth[i] > 0.0) {
      s += std::abs(estimate[i] - truth[i]);
      ++n;
    }
  require(n > 0, ErrorKind::InvalidArgument, "mean_abs_error: no valid ground truth");
  return s / static_cast<double>(n);
}

struct PointCloud {
  std::vector<Vec3> points;                         // mm
  std::vector<std::array<std::uint8_t, 3>> colors;  // RGB

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }

  void add(const Vec3& p, std::array<std::uint8_t, 3> c) {
    require(std::isfinite(p.x()) && std::isfinite(p.y()) && std::isfinite(p.z()),
            ErrorKind::InvalidArgument, "point cloud coordinates must be finite");
    points.push_back(p);
    colors.push_back(c);
  }

  void append(const PointCloud& other) {
    points.insert(points.end(), other.points.begin(), other.points.end());
    colors.insert(colors.end(), other.colors.begin(), other.colors.end());
  }
};

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace fastmvs
