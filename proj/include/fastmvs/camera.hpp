#pragma once

#include <cmath>
#include <string>
#include <utility>

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/LU>

#include "fastmvs/error.hpp"
#include "fastmvs/tensor.hpp"

namespace fastmvs {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Pinhole intrinsics in pixels. Pixel centers sit at integer coordinates, so
/// resampling an image by a factor s maps pixel u to u*s and the intrinsics
/// scale uniformly.
struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;

  Intrinsics() = default;
  Intrinsics(double fx_, double fy_, double cx_, double cy_) : fx(fx_), fy(fy_), cx(cx_), cy(cy_) {
    require(fx > 0.0 && fy > 0.0, ErrorKind::InvalidArgument, "focal lengths must be positive");
  }

  Mat3 matrix() const {
    Mat3 k;
    k << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
    return k;
  }

  Mat3 inverse() const {
    Mat3 k;
    k << 1.0 / fx, 0.0, -cx / fx, 0.0, 1.0 / fy, -cy / fy, 0.0, 0.0, 1.0;
    return k;
  }

  friend bool operator==(const Intrinsics&, const Intrinsics&) = default;
};

/// World-to-camera rigid transform: x_cam = rotation * x_world + translation (mm).
class Pose {
 public:
  static constexpr double kOrthoTolerance = 1e-9;

  Pose() : rotation_(Mat3::Identity()), translation_(Vec3::Zero()) {}

  Pose(const Mat3& rotation, const Vec3& translation)
      : rotation_(rotation), translation_(translation) {
    require(is_rotation(rotation), ErrorKind::InvalidArgument,
            "rotation is not orthonormal with det +1");
  }

  static bool is_rotation(const Mat3& r, double tol = kOrthoTolerance) {
    const double ortho = (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff();
    return ortho <= tol && std::abs(r.determinant() - 1.0) <= tol;
  }

  const Mat3& rotation() const noexcept { return rotation_; }
  const Vec3& translation() const noexcept { return translation_; }

  Vec3 center() const { return -rotation_.transpose() * translation_; }
  Vec3 to_camera(const Vec3& world) const { return rotation_ * world + translation_; }
  Vec3 to_world(const Vec3& cam) const { return rotation_.transpose() * (cam - translation_); }

 private:
  Mat3 rotation_;
  Vec3 translation_;
};

struct DepthRange {
  double min = 1.0;
  double max = 2.0;

  DepthRange() = default;
  DepthRange(double lo, double hi) : min(lo), max(hi) {
    require(lo > 0.0 && lo < hi, ErrorKind::InvalidArgument, "depth range needs 0 < d_min < d_max");
  }
  double span() const { return max - min; }
};

/// One calibrated input view. The image is stored channel-first (3 x H x W),
/// values in [0, 1]; intrinsics refer to the image's own resolution.
struct CameraView {
  std::string id;
  Tensor image;
  Intrinsics intrinsics;
  Pose pose;
  DepthRange depth_range;

  std::size_t height() const { return image.rank() == 3 ? image.dim(1) : 0; }
  std::size_t width() const { return image.rank() == 3 ? image.dim(2) : 0; }
};

inline Intrinsics scale_intrinsics(const Intrinsics& k, double s) {
  require(s > 0.0, ErrorKind::InvalidArgument, "intrinsics scale must be positive");
  return Intrinsics(k.fx * s, k.fy * s, k.cx * s, k.cy * s);
}

inline Vec3 backproject(const Vec2& pixel, double depth, const Intrinsics& k) {
  require(depth > 0.0, ErrorKind::InvalidArgument, "backproject: depth must be positive");
  return Vec3((pixel.x() - k.cx) / k.fx * depth, (pixel.y() - k.cy) / k.fy * depth, depth);
}

inline Vec2 project(const Vec3& cam, const Intrinsics& k) {
  return Vec2(k.fx * cam.x() / cam.z() + k.cx, k.fy * cam.y() / cam.z() + k.cy);
}

struct Reprojection {
  Vec2 pixel = Vec2::Zero();
  double z = 0.0;  // depth of the point in the target camera
  bool in_front = false;
};

struct ReprojectionDerivative {
  Vec2 first = Vec2::Zero();   // d pixel / d depth
  Vec2 second = Vec2::Zero();  // d^2 pixel / d depth^2
  bool valid = false;
};

/// Precomputed reference-to-source pixel transfer. For a reference pixel p at
/// depth d the homogeneous source point is h = d * M * [p;1] + m with
/// M = K_s R_s R_r^T K_r^-1 and m = K_s (t_s - R_s R_r^T t_r).
class ViewTransfer {
 public:
  ViewTransfer(const Intrinsics& ref_k, const Pose& ref_pose, const Intrinsics& src_k,
               const Pose& src_pose) {
    const Mat3 r_rel = src_pose.rotation() * ref_pose.rotation().transpose();
    const Vec3 t_rel = src_pose.translation() - r_rel * ref_pose.translation();
    m_ = src_k.matrix() * r_rel * ref_k.inverse();
    offset_ = src_k.matrix() * t_rel;
  }

  ViewTransfer(const CameraView& ref, const CameraView& src)
      : ViewTransfer(ref.intrinsics, ref.pose, src.intrinsics, src.pose) {}

  Reprojection apply(const Vec2& p, double depth) const {
    const Vec3 h = ray(p) * depth + offset_;
    Reprojection out;
    out.z = h.z();
    out.in_front = h.z() > 0.0;
    if (out.in_front) out.pixel = Vec2(h.x() / h.z(), h.y() / h.z());
    return out;
  }

  ReprojectionDerivative derivative(const Vec2& p, double depth) const {
    const Vec3 a = ray(p);
    const Vec3 h = a * depth + offset_;
    ReprojectionDerivative out;
    if (!(h.z() > 0.0)) return out;
    const double inv_z = 1.0 / h.z();
    out.first = Vec2((a.x() * h.z() - h.x() * a.z()) * inv_z * inv_z,
                     (a.y() * h.z() - h.y() * a.z()) * inv_z * inv_z);
    out.second = -2.0 * a.z() * inv_z * out.first;
    out.valid = true;
    return out;
  }

 private:
  Vec3 ray(const Vec2& p) const { return m_ * Vec3(p.x(), p.y(), 1.0); }

  Mat3 m_;
  Vec3 offset_;
};

inline Reprojection reproject(const Vec2& p, double depth, const CameraView& ref,
                              const CameraView& src) {
  require(depth > 0.0, ErrorKind::InvalidArgument, "reproject: depth must be positive");
  return ViewTransfer(ref, src).apply(p, depth);
}

/// d p' / d depth of the reprojection. valid == false when the point lands
/// behind the source camera.
inline ReprojectionDerivative reproject_jacobian(const Vec2& p, double depth, const CameraView& ref,
                                                 const CameraView& src) {
  require(depth > 0.0, ErrorKind::InvalidArgument, "reproject_jacobian: depth must be positive");
  return ViewTransfer(ref, src).derivative(p, depth);
}

/// Camera with intrinsics rescaled to a feature map s times the image size.
inline CameraView scaled_camera(const CameraView& view, double s) {
  CameraView out;
  out.id = view.id;
  out.intrinsics = scale_intrinsics(view.intrinsics, s);
  out.pose = view.pose;
  out.depth_range = view.depth_range;
  return out;
}

/// Rotation whose rows are the camera axes expressed in world coordinates;
/// the camera looks along +z towards target with image y pointing along -up.
inline Mat3 look_at_rotation(const Vec3& eye, const Vec3& target, const Vec3& up) {
  const Vec3 z = (target - eye).normalized();
  const Vec3 x = z.cross(up).normalized();
  const Vec3 y = z.cross(x);
  Mat3 r;
  r.row(0) = x.transpose();
  r.row(1) = y.transpose();
  r.row(2) = z.transpose();
  return r;
}

inline Pose look_at_pose(const Vec3& eye, const Vec3& target, const Vec3& up) {
  const Mat3 r = look_at_rotation(eye, target, up);
  return Pose(r, -r * eye);
}

}  // namespace fastmvs
