#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <optional>
#include <random>
#include <vector>

#include "fastmvs/camera.hpp"
#include "fastmvs/io.hpp"
#include "fastmvs/tensor.hpp"

namespace fastmvs {

enum class SurfaceKind { Plane, Sphere, Step };

/// World frame: the cameras sit on the -z side of the target and look along +z.
struct SurfaceSpec {
  SurfaceKind kind = SurfaceKind::Plane;
  // Plane: n . x = offset.
  Vec3 normal = Vec3(0.0, 0.0, -1.0);
  double offset = 0.0;
  // Sphere.
  Vec3 center = Vec3(0.0, 0.0, 400.0);
  double radius = 400.0;
  // Step: z = near_z for x < 0, z = far_z for x >= 0, wall along x = 0.
  double near_z = -40.0;
  double far_z = 40.0;
};

struct TextureSpec {
  double frequency = 0.08;        // radians per mm of the base sinusoids
  double noise_amplitude = 0.25;  // value-noise contribution
  double noise_scale = 30.0;      // mm per lattice cell
  std::uint64_t seed = 1;
};

struct RigSpec {
  std::size_t count = 5;
  double radius = 600.0;        // mm from target
  double arc_step_deg = 15.0;   // azimuth spacing
  double elevation_deg = 4.0;   // alternating up/down per view
  Vec3 target = Vec3::Zero();
  double focal = 80.0;          // pixels at full resolution
};

struct SceneSpec {
  SurfaceSpec surface;
  TextureSpec texture;
  RigSpec rig;
  std::size_t height = 64;
  std::size_t width = 64;
  double depth_min = 480.0;
  double depth_interval = 40.0;  // per hypothesis plane
  std::size_t planes = 8;

  DepthRange depth_range() const {
    return DepthRange(depth_min, depth_min + depth_interval * static_cast<double>(planes - 1));
  }

  void validate() const {
    require(height % 8 == 0 && width % 8 == 0 && height > 0 && width > 0, ErrorKind::Config,
            "scene image size must be divisible by 8");
    require(rig.count >= 2, ErrorKind::Config, "scene needs at least two cameras");
    require(rig.radius > 0.0 && rig.focal > 0.0, ErrorKind::Config, "rig radius and focal must be positive");
    require(depth_min > 0.0 && depth_interval > 0.0 && planes >= 2, ErrorKind::Config,
            "scene depth range invalid");
    if (surface.kind == SurfaceKind::Sphere)
      require(surface.radius > 0.0, ErrorKind::Config, "sphere radius must be positive");
    if (surface.kind == SurfaceKind::Plane)
      require(surface.normal.norm() > 0.0, ErrorKind::Config, "plane normal must be nonzero");
  }
};

/// Seeded smooth solid texture: sinusoids plus trilinear value noise with a
/// smoothstep fade, evaluated at world points. RGB in [0, 1].
class SolidTexture {
 public:
  explicit SolidTexture(const TextureSpec& spec) : spec_(spec) {
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (auto& v : lattice_) v = u(rng);
    for (std::size_t i = 0; i < perm_.size(); ++i) perm_[i] = static_cast<std::uint8_t>(i);
    std::shuffle(perm_.begin(), perm_.end(), rng);
    std::uniform_real_distribution<double> ph(0.0, 2.0 * std::numbers::pi);
    for (auto& p : phase_) p = ph(rng);
  }

  std::array<double, 3> operator()(const Vec3& p) const {
    const double f = spec_.frequency;
    std::array<double, 3> rgb{};
    for (int c = 0; c < 3; ++c) {
      const double s1 = std::sin(f * (p.x() + 0.6 * p.y()) + phase_[c]);
      const double s2 = std::sin(f * (0.7 * p.y() - 0.5 * p.x() + 0.3 * p.z()) * 1.37 + phase_[c + 3]);
      const double n = noise(p / spec_.noise_scale, c);
      rgb[c] = std::clamp(0.5 + 0.18 * s1 + 0.14 * s2 + spec_.noise_amplitude * n, 0.0, 1.0);
    }
    return rgb;
  }

 private:
  double lattice(long long i, long long j, long long k, int c) const {
    const auto h = [&](long long v, std::size_t a) {
      return perm_[(static_cast<std::size_t>(v & 255) + a) & 255];
    };
    const std::size_t idx = h(i + 31 * c, h(j, h(k, 0)));
    return lattice_[idx];
  }

  double noise(const Vec3& q, int c) const {
    const double fx = std::floor(q.x()), fy = std::floor(q.y()), fz = std::floor(q.z());
    const long long i = static_cast<long long>(fx), j = static_cast<long long>(fy),
                    k = static_cast<long long>(fz);
    auto fade = [](double t) { return t * t * (3.0 - 2.0 * t); };
    const double tx = fade(q.x() - fx), ty = fade(q.y() - fy), tz = fade(q.z() - fz);
    double out = 0.0;
    for (int dz = 0; dz < 2; ++dz)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const double w = (dx ? tx : 1 - tx) * (dy ? ty : 1 - ty) * (dz ? tz : 1 - tz);
          out += w * lattice(i + dx, j + dy, k + dz, c);
        }
    return out;
  }

  TextureSpec spec_;
  std::array<double, 256> lattice_{};
  std::array<std::uint8_t, 256> perm_{};
  std::array<double, 6> phase_{};
};

/// Smallest t > 0 with origin + t * dir on the surface.
inline std::optional<double> intersect(const SurfaceSpec& s, const Vec3& origin, const Vec3& dir) {
  constexpr double kMin = 1e-9;
  auto plane_hit = [&](const Vec3& n, double offset) -> std::optional<double> {
    const double denom = n.dot(dir);
    if (std::abs(denom) < 1e-15) return std::nullopt;
    const double t = (offset - n.dot(origin)) / denom;
    if (t > kMin) return t;
    return std::nullopt;
  };
  switch (s.kind) {
    case SurfaceKind::Plane:
      return plane_hit(s.normal, s.offset);
    case SurfaceKind::Sphere: {
      const Vec3 oc = origin - s.center;
      const double a = dir.squaredNorm();
      const double b = oc.dot(dir);
      const double c = oc.squaredNorm() - s.radius * s.radius;
      const double disc = b * b - a * c;
      if (disc < 0.0) return std::nullopt;
      const double sq = std::sqrt(disc);
      const double t0 = (-b - sq) / a;
      if (t0 > kMin) return t0;
      const double t1 = (-b + sq) / a;
      if (t1 > kMin) return t1;
      return std::nullopt;
    }
    case SurfaceKind::Step: {
      std::optional<double> best;
      auto consider = [&](std::optional<double> t, auto accept) {
        if (!t) return;
        const Vec3 p = origin + *t * dir;
        if (accept(p) && (!best || *t < *best)) best = t;
      };
      const double lo = std::min(s.near_z, s.far_z), hi = std::max(s.near_z, s.far_z);
      consider(plane_hit(Vec3(0, 0, 1), s.near_z), [](const Vec3& p) { return p.x() < 0.0; });
      consider(plane_hit(Vec3(0, 0, 1), s.far_z), [](const Vec3& p) { return p.x() >= 0.0; });
      consider(plane_hit(Vec3(1, 0, 0), 0.0), [&](const Vec3& p) { return p.z() >= lo && p.z() <= hi; });
      return best;
    }
  }
  return std::nullopt;
}

/// Euclidean distance from a point to the surface.
inline double surface_distance(const SurfaceSpec& s, const Vec3& p) {
  switch (s.kind) {
    case SurfaceKind::Plane:
      return std::abs(s.normal.dot(p) - s.offset) / s.normal.norm();
    case SurfaceKind::Sphere:
      return std::abs((p - s.center).norm() - s.radius);
    case SurfaceKind::Step: {
      const double lo = std::min(s.near_z, s.far_z), hi = std::max(s.near_z, s.far_z);
      const double dn = p.x() < 0.0 ? std::abs(p.z() - s.near_z) : std::hypot(p.x(), p.z() - s.near_z);
      const double df = p.x() >= 0.0 ? std::abs(p.z() - s.far_z) : std::hypot(p.x(), p.z() - s.far_z);
      const double dz = p.z() < lo ? lo - p.z() : (p.z() > hi ? p.z() - hi : 0.0);
      const double dw = std::hypot(p.x(), dz);
      return std::min({dn, df, dw});
    }
  }
  return 0.0;
}

struct RenderedView {
  CameraView view;  // full-resolution image
  Tensor depth;     // H x W, 0 where the ray misses
};

inline std::vector<Pose> rig_poses(const RigSpec& rig) {
  std::vector<Pose> poses;
  const double deg = std::numbers::pi / 180.0;
  for (std::size_t i = 0; i < rig.count; ++i) {
    const double az = (static_cast<double>(i) - 0.5 * static_cast<double>(rig.count - 1)) * rig.arc_step_deg * deg;
    const double el = (i % 2 == 0 ? 1.0 : -1.0) * rig.elevation_deg * deg;
    const Vec3 eye = rig.target + rig.radius * Vec3(std::sin(az) * std::cos(el), std::sin(el),
                                                    -std::cos(az) * std::cos(el));
    poses.push_back(look_at_pose(eye, rig.target, Vec3(0.0, -1.0, 0.0)));
  }
  return poses;
}

/// Ray-casts every camera of the rig. Pixel centres sit at integer
/// coordinates; depth is the camera-frame z of the hit.
inline std::vector<RenderedView> render_scene(const SceneSpec& spec) {
  spec.validate();
  const SolidTexture texture(spec.texture);
  const Intrinsics k(spec.rig.focal, spec.rig.focal, 0.5 * static_cast<double>(spec.width - 1),
                     0.5 * static_cast<double>(spec.height - 1));
  std::vector<RenderedView> out;
  const auto poses = rig_poses(spec.rig);
  for (std::size_t v = 0; v < poses.size(); ++v) {
    RenderedView rv;
    rv.view.id = view_name(v);
    rv.view.intrinsics = k;
    rv.view.pose = poses[v];
    rv.view.depth_range = spec.depth_range();
    rv.view.image = Tensor({3, spec.height, spec.width});
    rv.depth = Tensor({spec.height, spec.width});
    const Vec3 origin = poses[v].center();
    const Mat3 rt = poses[v].rotation().transpose();
    std::size_t hits = 0;
    for (std::size_t y = 0; y < spec.height; ++y)
      for (std::size_t x = 0; x < spec.width; ++x) {
        // Camera-frame direction with unit z, so the ray parameter is the depth.
        const Vec3 d_cam((static_cast<double>(x) - k.cx) / k.fx, (static_cast<double>(y) - k.cy) / k.fy, 1.0);
        const auto t = intersect(spec.surface, origin, rt * d_cam);
        if (!t) continue;
        ++hits;
        rv.depth(y, x) = *t;
        const auto rgb = texture(origin + *t * (rt * d_cam));
        for (std::size_t c = 0; c < 3; ++c) rv.view.image(c, y, x) = rgb[c];
      }
    require(hits > 0, ErrorKind::Config, "camera " + rv.view.id + " does not see the surface");
    out.push_back(std::move(rv));
  }
  return out;
}

/// For each view, the n other views closest in rig order (ties to the lower index).
inline PairList nearest_pairs(std::size_t count, std::size_t sources) {
  require(sources >= 1 && sources < count, ErrorKind::Config, "source count must be in [1, views)");
  PairList pairs;
  for (std::size_t r = 0; r < count; ++r) {
    std::vector<std::size_t> others;
    for (std::size_t s = 0; s < count; ++s)
      if (s != r) others.push_back(s);
    std::stable_sort(others.begin(), others.end(), [r](std::size_t a, std::size_t b) {
      const auto da = a > r ? a - r : r - a, db = b > r ? b - r : r - b;
      return da < db;
    });
    others.resize(sources);
    pairs.push_back({r, others});
  }
  return pairs;
}

/// Writes cams/, images/, depths/ and pair.txt under dir.
inline void write_scene(const std::filesystem::path& dir, const SceneSpec& spec,
                        const std::vector<RenderedView>& views, const PairList& pairs) {
  namespace fs = std::filesystem;
  for (const char* sub : {"cams", "images", "depths"}) fs::create_directories(dir / sub);
  for (std::size_t i = 0; i < views.size(); ++i) {
    CamFile cam;
    cam.pose = views[i].view.pose;
    cam.intrinsics = views[i].view.intrinsics;
    cam.depth_min = spec.depth_min;
    cam.depth_interval = spec.depth_interval;
    write_cam((dir / "cams" / (view_name(i) + "_cam.txt")).string(), cam);
    write_ppm((dir / "images" / (view_name(i) + ".ppm")).string(), views[i].view.image);
    write_pfm((dir / "depths" / (view_name(i) + ".pfm")).string(), views[i].depth);
  }
  write_pairs((dir / "pair.txt").string(), pairs);
}

/// In-memory scene in the same shape load_scene produces, without the 8-bit
/// image quantisation of the files.
inline SceneData scene_data(const std::vector<RenderedView>& views, const PairList& pairs) {
  SceneData s;
  for (const auto& v : views) {
    s.views.push_back(v.view);
    s.gt_depth.emplace_back(v.depth);
  }
  s.pairs = pairs;
  validate_pairs(s.pairs, s.views.size());
  return s;
}

}  // namespace fastmvs
