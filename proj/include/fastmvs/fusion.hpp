#pragma once

#include <algorithm>
#include <array>
#include <tuple>
#include <cmath>
#include <limits>
#include <optional>
#include <unordered_map>
#include <vector>

#include "fastmvs/camera.hpp"
#include "fastmvs/depth_map.hpp"

namespace fastmvs {

struct FusionConfig {
  double prob_thresh = 0.5;
  double eta = 0.12;  // pixels
  std::size_t min_views = 3;  // V, counting the reference view

  void validate() const {
    require(prob_thresh >= 0.0, ErrorKind::Config, "prob_thresh must be >= 0");
    require(eta > 0.0, ErrorKind::Config, "eta must be positive");
    require(min_views >= 2, ErrorKind::Config, "V must be >= 2");
  }
};

/// Clears the mask where the confidence, resized to the depth resolution by
/// nearest neighbour, falls below prob_thresh.
inline DepthMap photometric_filter(const DepthMap& depth, const Tensor& confidence, double prob_thresh) {
  require_rank(confidence, 2, "photometric_filter confidence");
  const std::size_t h = depth.height(), w = depth.width();
  const std::size_t ch = confidence.dim(0), cw = confidence.dim(1);
  DepthMap out = depth;
  out.confidence = Tensor({h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double c = confidence(y * ch / h, x * cw / w);
      out.confidence(y, x) = c;
      if (c < prob_thresh) out.mask[y * w + x] = 0;
    }
  return out;
}

struct Consistency {
  double discrepancy = 0.0;  // pixels
  double ref_depth = 0.0;    // source depth expressed in the reference frame
};

namespace detail {

/// Inverse depth of a map bilinearly interpolated at a continuous pixel. Every
/// tap carrying weight must be valid.
inline std::optional<double> sample_inverse_depth(const DepthMap& map, const Vec2& p) {
  const std::size_t h = map.height(), w = map.width();
  if (!(p.x() >= 0.0 && p.y() >= 0.0 && p.x() <= static_cast<double>(w - 1) &&
        p.y() <= static_cast<double>(h - 1)))
    return std::nullopt;
  const BilinearTap tap(p.x(), p.y(), h, w);
  double inv = 0.0;
  for (int k = 0; k < 4; ++k) {
    if (tap.weight[k] == 0.0) continue;
    if (!map.mask[tap.idx[k]]) return std::nullopt;
    inv += tap.weight[k] / map.depth[tap.idx[k]];
  }
  if (!(inv > 0.0)) return std::nullopt;
  return inv;
}

}  // namespace detail

/// f * baseline * |1/D(p) - 1/D^(p')| with D^ transferred into the reference
/// frame. Cameras carry intrinsics at the depth maps' resolution. nullopt marks
/// an unverifiable pixel (outside the source frame or invalid source depth).
inline std::optional<Consistency> geometric_discrepancy(const Vec2& p, const DepthMap& ref,
                                                        const DepthMap& src, const CameraView& ref_cam,
                                                        const CameraView& src_cam) {
  const std::size_t x = static_cast<std::size_t>(p.x()), y = static_cast<std::size_t>(p.y());
  require(x < ref.width() && y < ref.height(), ErrorKind::InvalidArgument,
          "geometric_discrepancy: pixel outside reference map");
  if (!ref.valid(y, x)) return std::nullopt;
  const double d = ref.depth(y, x);
  const Reprojection rp = reproject(p, d, ref_cam, src_cam);
  if (!rp.in_front) return std::nullopt;
  const auto inv = detail::sample_inverse_depth(src, rp.pixel);
  if (!inv) return std::nullopt;
  const Vec3 world = src_cam.pose.to_world(backproject(rp.pixel, 1.0 / *inv, src_cam.intrinsics));
  const double z_ref = ref_cam.pose.to_camera(world).z();
  if (!(z_ref > 0.0)) return std::nullopt;
  const double baseline = (ref_cam.pose.center() - src_cam.pose.center()).norm();
  return Consistency{ref_cam.intrinsics.fx * baseline * std::abs(1.0 / d - 1.0 / z_ref), z_ref};
}

/// One view entering fusion: depth map and confidence at any resolutions, the
/// calibrated camera with its full-resolution image (used for colour).
struct FusionView {
  DepthMap depth;
  Tensor confidence;
  CameraView camera;
};

struct PixelRef {
  std::size_t view = 0;
  std::size_t y = 0;
  std::size_t x = 0;
  friend bool operator==(const PixelRef&, const PixelRef&) = default;
  friend bool operator<(const PixelRef& a, const PixelRef& b) {
    return std::tie(a.view, a.y, a.x) < std::tie(b.view, b.y, b.x);
  }
};

struct FusionResult {
  PointCloud cloud;
  std::vector<PixelRef> origin;        // reference pixel behind each point
  std::vector<PixelRef> filtered;      // pixels surviving the photometric filter
  std::vector<PixelRef> consistent;    // filtered pixels with count + 1 >= V
};

namespace detail {

inline CameraView depth_camera(const FusionView& v) {
  require(v.camera.width() > 0, ErrorKind::InvalidArgument, "fusion view " + v.camera.id + " has no image");
  const double s = static_cast<double>(v.depth.width()) / static_cast<double>(v.camera.width());
  require(std::abs(static_cast<double>(v.depth.height()) - s * static_cast<double>(v.camera.height())) < 1e-9,
          ErrorKind::Dimension, "fusion view " + v.camera.id + ": depth and image aspect differ");
  return scaled_camera(v.camera, s);
}

}  // namespace detail

/// Photometric filter, pairwise geometric consistency against every other view
/// and depth averaging in the reference frame. Each reference view contributes
/// its own points; nothing is deduplicated across views.
inline FusionResult fuse_detailed(const std::vector<FusionView>& views, const FusionConfig& cfg) {
  cfg.validate();
  FusionResult res;
  if (views.size() < cfg.min_views) return res;
  std::vector<CameraView> cams;
  std::vector<DepthMap> filtered;
  for (const auto& v : views) {
    cams.push_back(detail::depth_camera(v));
    filtered.push_back(photometric_filter(v.depth, v.confidence, cfg.prob_thresh));
  }
  for (std::size_t r = 0; r < views.size(); ++r) {
    const DepthMap& ref = filtered[r];
    const Tensor& img = views[r].camera.image;
    const double to_img = static_cast<double>(views[r].camera.width()) / static_cast<double>(ref.width());
    for (std::size_t y = 0; y < ref.height(); ++y)
      for (std::size_t x = 0; x < ref.width(); ++x) {
        if (!ref.valid(y, x)) continue;
        res.filtered.push_back({r, y, x});
        const Vec2 p(static_cast<double>(x), static_cast<double>(y));
        std::size_t count = 0;
        double depth_sum = ref.depth(y, x);
        for (std::size_t s = 0; s < views.size(); ++s) {
          if (s == r) continue;
          const auto c = geometric_discrepancy(p, ref, filtered[s], cams[r], cams[s]);
          if (c && c->discrepancy < cfg.eta) {
            ++count;
            depth_sum += c->ref_depth;
          }
        }
        if (count + 1 < cfg.min_views) continue;
        res.consistent.push_back({r, y, x});
        const double d = depth_sum / static_cast<double>(count + 1);
        const Vec3 world = cams[r].pose.to_world(backproject(p, d, cams[r].intrinsics));
        const BilinearTap tap(p.x() * to_img, p.y() * to_img, img.dim(1), img.dim(2));
        std::array<std::uint8_t, 3> rgb{};
        for (std::size_t c = 0; c < 3; ++c)
          rgb[c] = to_byte(tap.value(img.data() + c * img.dim(1) * img.dim(2)));
        res.cloud.add(world, rgb);
        res.origin.push_back({r, y, x});
      }
  }
  return res;
}

inline PointCloud fuse(const std::vector<FusionView>& views, const FusionConfig& cfg) {
  return fuse_detailed(views, cfg).cloud;
}

/// Uniform-grid nearest-neighbour index over a fixed point set.
class NearestNeighborIndex {
 public:
  explicit NearestNeighborIndex(const std::vector<Vec3>& points) : points_(points) {
    require(!points_.empty(), ErrorKind::InvalidArgument, "nearest-neighbour index needs points");
    lo_ = hi_ = points_.front();
    for (const auto& p : points_) {
      lo_ = lo_.cwiseMin(p);
      hi_ = hi_.cwiseMax(p);
    }
    const Vec3 ext = (hi_ - lo_).cwiseMax(1e-9);
    // About two points per cell for a surface-like set.
    const double area = ext.x() * ext.y() + ext.y() * ext.z() + ext.x() * ext.z();
    cell_ = std::max(std::sqrt(2.0 * area / static_cast<double>(points_.size())), 1e-6);
    for (int a = 0; a < 3; ++a) dims_[a] = static_cast<long long>(ext[a] / cell_) + 1;
    for (std::size_t i = 0; i < points_.size(); ++i) cells_[key(cell_of(points_[i]))].push_back(i);
  }

  /// Distance to the nearest indexed point.
  double nearest_distance(const Vec3& q) const {
    Cell c = cell_of(q);
    for (int a = 0; a < 3; ++a) c[a] = std::clamp<long long>(c[a], 0, dims_[a] - 1);
    double best = std::numeric_limits<double>::infinity();
    const long long max_ring = std::max({dims_[0], dims_[1], dims_[2]});
    for (long long r = 0; r <= max_ring; ++r) {
      if (r > 0 && ring_lower_bound(q, c, r) > best) break;
      for (long long i = std::max(c[0] - r, 0LL); i <= std::min(c[0] + r, dims_[0] - 1); ++i)
        for (long long j = std::max(c[1] - r, 0LL); j <= std::min(c[1] + r, dims_[1] - 1); ++j)
          for (long long k = std::max(c[2] - r, 0LL); k <= std::min(c[2] + r, dims_[2] - 1); ++k) {
            if (std::max({std::llabs(i - c[0]), std::llabs(j - c[1]), std::llabs(k - c[2])}) != r) continue;
            const auto it = cells_.find(key({i, j, k}));
            if (it == cells_.end()) continue;
            for (std::size_t idx : it->second) best = std::min(best, (points_[idx] - q).norm());
          }
    }
    return best;
  }

 private:
  using Cell = std::array<long long, 3>;

  Cell cell_of(const Vec3& p) const {
    Cell c;
    for (int a = 0; a < 3; ++a) c[a] = static_cast<long long>(std::floor((p[a] - lo_[a]) / cell_));
    return c;
  }
  // Every point in ring r lies outside the box of cells within Chebyshev
  // distance r - 1 of c; returns the distance from q to that region.
  double ring_lower_bound(const Vec3& q, const Cell& c, long long r) const {
    double bound = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
      const double lo = lo_[a] + static_cast<double>(c[a] - (r - 1)) * cell_;
      const double hi = lo_[a] + static_cast<double>(c[a] + r) * cell_;
      if (q[a] < lo || q[a] > hi) return 0.0;
      bound = std::min({bound, q[a] - lo, hi - q[a]});
    }
    return bound;
  }

  static long long key(const Cell& c) {
    return (c[0] * 73856093LL) ^ (c[1] * 19349663LL) ^ (c[2] * 83492791LL);
  }

  std::vector<Vec3> points_;
  Vec3 lo_, hi_;
  double cell_ = 1.0;
  long long dims_[3] = {1, 1, 1};
  std::unordered_map<long long, std::vector<std::size_t>> cells_;
};

struct AccuracyReport {
  double accuracy = 0.0;      // cloud -> reference, mm
  double completeness = 0.0;  // reference -> cloud, mm
  double overall = 0.0;
};

inline AccuracyReport eval_acc_comp(const PointCloud& cloud, const PointCloud& reference) {
  require(!cloud.empty() && !reference.empty(), ErrorKind::InvalidArgument,
          "eval_acc_comp: point clouds must be non-empty");
  const NearestNeighborIndex ref_index(reference.points), cloud_index(cloud.points);
  AccuracyReport r;
  for (const auto& p : cloud.points) r.accuracy += ref_index.nearest_distance(p);
  for (const auto& p : reference.points) r.completeness += cloud_index.nearest_distance(p);
  r.accuracy /= static_cast<double>(cloud.size());
  r.completeness /= static_cast<double>(reference.size());
  r.overall = 0.5 * (r.accuracy + r.completeness);
  return r;
}

}  // namespace fastmvs
