#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include <Eigen/Core>

#include "fastmvs/autodiff.hpp"
#include "fastmvs/camera.hpp"

namespace fastmvs {

struct GNConfig {
  int iterations = 1;
  double damping = 1e-6;          // added to J^T J
  std::size_t min_views = 1;      // valid source views needed to update a pixel
  double max_step_fraction = 0.05;  // |delta| <= fraction * (d_max - d_min); 0 disables

  void validate() const {
    require(iterations >= 0, ErrorKind::Config, "GN iterations must be >= 0");
    require(damping >= 0.0, ErrorKind::Config, "GN damping must be >= 0");
    require(max_step_fraction >= 0.0, ErrorKind::Config, "GN step cap must be >= 0");
  }
};

/// Per-source-view linearisation of the feature residual at one pixel.
struct ViewLinearization {
  std::size_t view = 0;
  Eigen::VectorXd residual;  // F_i(p'_i) - F_0(p)
  Eigen::VectorXd jacobian;  // dF_i/dp' * dp'/dD
};

struct PixelLinearization {
  std::vector<ViewLinearization> views;
  std::size_t skipped = 0;  // behind the source camera or outside its frame

  bool usable(std::size_t min_views) const { return !views.empty() && views.size() >= min_views; }
};

namespace detail {

struct GNViewState {
  bool valid = false;
  Vec2 pixel = Vec2::Zero();
  ReprojectionDerivative dpix;
};

inline GNViewState gn_view_state(const ViewTransfer& t, const Vec2& p, double depth, std::size_t h,
                                 std::size_t w) {
  GNViewState s;
  const Reprojection rp = t.apply(p, depth);
  if (!rp.in_front) return s;
  if (!(rp.pixel.x() >= 0.0 && rp.pixel.x() <= static_cast<double>(w - 1) && rp.pixel.y() >= 0.0 &&
        rp.pixel.y() <= static_cast<double>(h - 1)))
    return s;
  s.dpix = t.derivative(p, depth);
  s.valid = s.dpix.valid;
  s.pixel = rp.pixel;
  return s;
}

inline PixelLinearization linearize(const Vec2& p, double depth, const Tensor& ref_feats,
                                    const std::vector<const Tensor*>& src_feats,
                                    const std::vector<ViewTransfer>& transfers) {
  const std::size_t f = ref_feats.dim(0), h = ref_feats.dim(1), w = ref_feats.dim(2);
  const std::size_t ref_idx = static_cast<std::size_t>(std::lround(p.y())) * w +
                              static_cast<std::size_t>(std::lround(p.x()));
  PixelLinearization out;
  for (std::size_t i = 0; i < src_feats.size(); ++i) {
    const GNViewState s = gn_view_state(transfers[i], p, depth, h, w);
    if (!s.valid) {
      ++out.skipped;
      continue;
    }
    const BilinearTap tap(s.pixel.x(), s.pixel.y(), h, w);
    ViewLinearization v;
    v.view = i;
    v.residual.resize(static_cast<Eigen::Index>(f));
    v.jacobian.resize(static_cast<Eigen::Index>(f));
    for (std::size_t c = 0; c < f; ++c) {
      const double* plane = src_feats[i]->data() + c * h * w;
      v.residual[static_cast<Eigen::Index>(c)] = tap.value(plane) - ref_feats[c * h * w + ref_idx];
      v.jacobian[static_cast<Eigen::Index>(c)] =
          tap.dx(plane) * s.dpix.first.x() + tap.dy(plane) * s.dpix.first.y();
    }
    out.views.push_back(std::move(v));
  }
  return out;
}

inline void check_gn_inputs(const Tensor& ref_feats, const std::vector<const Tensor*>& src_feats,
                            std::size_t src_cams) {
  require_rank(ref_feats, 3, "GN reference features");
  require(src_feats.size() == src_cams, ErrorKind::Config, "GN: source features vs cameras");
  for (const Tensor* s : src_feats)
    require(s->same_shape(ref_feats), ErrorKind::Dimension, "GN: feature maps differ in shape");
}

inline std::vector<ViewTransfer> make_transfers(const CameraView& ref,
                                                const std::vector<CameraView>& srcs) {
  std::vector<ViewTransfer> t;
  for (const auto& s : srcs) t.emplace_back(ref, s);
  return t;
}

}  // namespace detail

/// Residuals r_i = F_i(p'_i) - F_0(p) for every usable source view. Cameras
/// carry intrinsics at the feature-map resolution; p is an integer pixel.
inline PixelLinearization residuals(const Vec2& p, double depth, const Tensor& ref_feats,
                                    const std::vector<const Tensor*>& src_feats,
                                    const CameraView& ref_cam, const std::vector<CameraView>& src_cams) {
  require(depth > 0.0, ErrorKind::InvalidArgument, "residuals: depth must be positive");
  detail::check_gn_inputs(ref_feats, src_feats, src_cams.size());
  return detail::linearize(p, depth, ref_feats, src_feats, detail::make_transfers(ref_cam, src_cams));
}

/// Same linearisation; provided under the name of the quantity callers want.
inline PixelLinearization jacobian(const Vec2& p, double depth, const Tensor& ref_feats,
                                   const std::vector<const Tensor*>& src_feats,
                                   const CameraView& ref_cam, const std::vector<CameraView>& src_cams) {
  return residuals(p, depth, ref_feats, src_feats, ref_cam, src_cams);
}

/// delta = -(J^T J + eps)^-1 J^T r over the stacked views. nullopt when the
/// normal equation is singular.
inline std::optional<double> gn_step(const Eigen::VectorXd& r, const Eigen::VectorXd& j, double eps) {
  require(r.size() == j.size() && r.size() > 0, ErrorKind::Dimension,
          "gn_step: residual and jacobian stacks must be non-empty and equal length");
  const double a = j.squaredNorm() + eps;
  if (!(a > 0.0) || !std::isfinite(a)) return std::nullopt;
  const double delta = -j.dot(r) / a;
  if (!std::isfinite(delta)) return std::nullopt;
  return delta;
}

inline std::optional<double> gn_step(const PixelLinearization& lin, double eps) {
  if (lin.views.empty()) return std::nullopt;
  double a = eps, b = 0.0;
  for (const auto& v : lin.views) {
    a += v.jacobian.squaredNorm();
    b += v.jacobian.dot(v.residual);
  }
  if (!(a > 0.0) || !std::isfinite(a)) return std::nullopt;
  const double delta = -b / a;
  if (!std::isfinite(delta)) return std::nullopt;
  return delta;
}

struct DeltaStats {
  double min = 0.0;
  double mean = 0.0;
  double max = 0.0;
};

struct RefinementResult {
  Var depth;
  Mask updated_mask;
  DeltaStats delta_stats;  // over updated pixels, refined minus input depth
};

/// One Gauss-Newton update of every pixel, recorded as a single tape node
/// whose backward pass differentiates the closed-form increment exactly,
/// including the dependence of J on the features and on the depth.
inline Var gauss_newton_iteration(Var depth, Var ref_feats, const std::vector<Var>& src_feats,
                                  const CameraView& ref_cam, const std::vector<CameraView>& src_cams,
                                  const GNConfig& cfg, double max_step, Mask& updated) {
  const Tensor& d = depth.value();
  const Tensor& f0 = ref_feats.value();
  std::vector<const Tensor*> srcs;
  for (const Var& v : src_feats) srcs.push_back(&v.value());
  detail::check_gn_inputs(f0, srcs, src_cams.size());
  require_rank(d, 2, "GN depth");
  const std::size_t f = f0.dim(0), h = f0.dim(1), w = f0.dim(2);
  require(d.dim(0) == h && d.dim(1) == w, ErrorKind::Config,
          "GN: depth map " + shape_string(d.shape()) + " does not match feature resolution " +
              shape_string(f0.shape()));
  const auto transfers = detail::make_transfers(ref_cam, src_cams);

  // 0 = untouched, 1 = updated, 2 = updated with a capped step (no gradient
  // through the increment).
  std::vector<std::uint8_t> state(h * w, 0);
  Tensor out = d;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t i = y * w + x;
      if (!(d[i] > 0.0) || !std::isfinite(d[i])) continue;
      const Vec2 p(static_cast<double>(x), static_cast<double>(y));
      const PixelLinearization lin = detail::linearize(p, d[i], f0, srcs, transfers);
      if (!lin.usable(cfg.min_views)) continue;
      const auto delta = gn_step(lin, cfg.damping);
      if (!delta) continue;
      double step = *delta;
      state[i] = 1;
      if (max_step > 0.0 && std::abs(step) > max_step) {
        step = std::copysign(max_step, step);
        state[i] = 2;
      }
      out[i] = d[i] + step;
      updated[i] = 1;
    }

  std::vector<Var> inputs{depth, ref_feats};
  inputs.insert(inputs.end(), src_feats.begin(), src_feats.end());
  return depth.tape->record(
      std::move(out), inputs,
      [state = std::move(state), transfers, f, h, w, eps = cfg.damping](BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        const Tensor& d = ctx.input(0);
        const Tensor& f0 = ctx.input(1);
        const std::size_t n_src = ctx.input_count() - 2;
        Tensor* gd = ctx.needs_grad(0) ? &ctx.grad_input(0) : nullptr;
        Tensor* gf0 = ctx.needs_grad(1) ? &ctx.grad_input(1) : nullptr;
        std::vector<Tensor*> gsrc(n_src, nullptr);
        for (std::size_t s = 0; s < n_src; ++s)
          if (ctx.needs_grad(s + 2)) gsrc[s] = &ctx.grad_input(s + 2);

        struct ViewCache {
          std::size_t view;
          detail::GNViewState st;
          BilinearTap tap;
        };
        std::vector<ViewCache> cache;
        std::vector<double> sval(f), gx(f), gy(f), gxy(f), r(f), jac(f);
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) {
            const std::size_t i = y * w + x;
            const double go = g[i];
            if (gd) (*gd)[i] += go;  // identity path d' = d + delta
            if (state[i] != 1 || go == 0.0) continue;
            const Vec2 p(static_cast<double>(x), static_cast<double>(y));

            cache.clear();
            double a = eps, b = 0.0;
            for (std::size_t s = 0; s < n_src; ++s) {
              const detail::GNViewState st = detail::gn_view_state(transfers[s], p, d[i], h, w);
              if (!st.valid) continue;
              cache.push_back({s, st, BilinearTap(st.pixel.x(), st.pixel.y(), h, w)});
              const ViewCache& vc = cache.back();
              const Tensor& fs = ctx.input(s + 2);
              for (std::size_t c = 0; c < f; ++c) {
                const double* plane = fs.data() + c * h * w;
                const double rv = vc.tap.value(plane) - f0[c * h * w + i];
                const double jv = vc.tap.dx(plane) * st.dpix.first.x() + vc.tap.dy(plane) * st.dpix.first.y();
                a += jv * jv;
                b += jv * rv;
              }
            }
            const double gb = -go / a;
            const double ga = go * b / (a * a);
            double gdepth = 0.0;
            for (const ViewCache& vc : cache) {
              const Tensor& fs = ctx.input(vc.view + 2);
              const Vec2 u = vc.st.dpix.first;
              const Vec2 u2 = vc.st.dpix.second;
              Vec2 gpix = Vec2::Zero();
              Vec2 gu = Vec2::Zero();
              const double fx = vc.tap.tx.frac, fy = vc.tap.ty.frac;
              const double sx = vc.tap.tx.slope, sy = vc.tap.ty.slope;
              // Map-value coefficients of the x / y coordinate derivatives.
              const double cdx[4] = {-sx * (1 - fy), sx * (1 - fy), -sx * fy, sx * fy};
              const double cdy[4] = {-sy * (1 - fx), -sy * fx, sy * (1 - fx), sy * fx};
              for (std::size_t c = 0; c < f; ++c) {
                const double* plane = fs.data() + c * h * w;
                const double s_val = vc.tap.value(plane);
                const double dxv = vc.tap.dx(plane), dyv = vc.tap.dy(plane), dxy = vc.tap.dxy(plane);
                const double rv = s_val - f0[c * h * w + i];
                const double jv = dxv * u.x() + dyv * u.y();
                const double g_j = gb * rv + 2.0 * ga * jv;
                const double g_r = gb * jv;
                const double g_dx = g_j * u.x(), g_dy = g_j * u.y();
                gu.x() += g_j * dxv;
                gu.y() += g_j * dyv;
                if (gf0) (*gf0)[c * h * w + i] -= g_r;
                if (Tensor* gs = gsrc[vc.view]) {
                  double* gp = gs->data() + c * h * w;
                  for (int q = 0; q < 4; ++q)
                    gp[vc.tap.idx[q]] += g_r * vc.tap.weight[q] + g_dx * cdx[q] + g_dy * cdy[q];
                }
                gpix.x() += g_r * dxv + g_dy * dxy;
                gpix.y() += g_r * dyv + g_dx * dxy;
              }
              gdepth += gpix.dot(u) + gu.dot(u2);
            }
            if (gd) (*gd)[i] += gdepth;
          }
      });
}

/// Runs cfg.iterations Gauss-Newton updates over a depth map whose resolution
/// equals the feature maps'. Pixels with non-positive depth or too few usable
/// source views keep their input value bit for bit.
inline RefinementResult refine_depth_map(Var depth, Var ref_feats, const std::vector<Var>& src_feats,
                                         const CameraView& ref_cam,
                                         const std::vector<CameraView>& src_cams, const GNConfig& cfg) {
  cfg.validate();
  const Tensor input = depth.value();
  RefinementResult res;
  res.updated_mask.assign(input.numel(), 0);
  const double max_step = cfg.max_step_fraction * ref_cam.depth_range.span();
  Var cur = depth;
  for (int it = 0; it < cfg.iterations; ++it)
    cur = gauss_newton_iteration(cur, ref_feats, src_feats, ref_cam, src_cams, cfg, max_step,
                                 res.updated_mask);
  if (cfg.iterations == 0) {
    // Still validate the resolution contract.
    const Tensor& f0 = ref_feats.value();
    require_rank(f0, 3, "GN reference features");
    require(input.rank() == 2 && input.dim(0) == f0.dim(1) && input.dim(1) == f0.dim(2),
            ErrorKind::Config, "GN: depth map does not match feature resolution");
  }
  res.depth = cur;
  const Tensor& out = cur.value();
  double mn = std::numeric_limits<double>::infinity(), mx = -mn, sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    if (!res.updated_mask[i]) continue;
    const double dlt = out[i] - input[i];
    mn = std::min(mn, dlt);
    mx = std::max(mx, dlt);
    sum += dlt;
    ++n;
  }
  if (n > 0) res.delta_stats = {mn, sum / static_cast<double>(n), mx};
  return res;
}

}  // namespace fastmvs
