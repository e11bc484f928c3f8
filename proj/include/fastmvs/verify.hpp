#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "fastmvs/autodiff.hpp"
#include "fastmvs/camera.hpp"
#include "fastmvs/cost_volume.hpp"
#include "fastmvs/fusion.hpp"
#include "fastmvs/gauss_newton.hpp"
#include "fastmvs/gradcheck.hpp"
#include "fastmvs/pipeline.hpp"
#include "fastmvs/propagation.hpp"
#include "fastmvs/scene.hpp"

// Verification suite shared by `fastmvs check` and the acceptance tests.

namespace fastmvs::verify {

struct Outcome {
  std::string name;
  bool pass = false;
  std::string detail;
};

inline std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(shape);
  for (double& v : t.storage()) v = u(rng);
  return t;
}

/// sum(x * w) for a fixed weight tensor, so every output entry matters.
inline Var weighted_sum(Var x, const Tensor& w) { return sum(mul(x, x.tape->constant(w))); }

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

struct GradCase {
  std::string name;
  ScalarFunction f;
  std::vector<Tensor> inputs;
};

/// A small two-view rig and smooth-ish random feature maps at 8 x 8.
struct GNFixture {
  CameraView ref;
  std::vector<CameraView> srcs;
  Tensor depth;
  Tensor ref_feats;
  std::vector<Tensor> src_feats;
};

inline GNFixture gn_fixture(std::mt19937_64& rng, std::size_t f = 3, std::size_t n = 8) {
  GNFixture fx;
  const Intrinsics k(10.0, 10.0, 3.5, 3.5);
  fx.ref.intrinsics = k;
  fx.ref.depth_range = DepthRange(450.0, 550.0);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int s = 0; s < 2; ++s) {
    CameraView c;
    c.intrinsics = k;
    c.depth_range = fx.ref.depth_range;
    const Vec3 eye((s == 0 ? 25.0 : -20.0) + 3.0 * u(rng), 6.0 * u(rng), 2.0 * u(rng));
    c.pose = look_at_pose(eye, Vec3(0.0, 0.0, 500.0), Vec3(0.0, -1.0, 0.0));
    fx.srcs.push_back(c);
  }
  fx.depth = Tensor({n, n});
  for (double& d : fx.depth.storage()) d = 500.0 + 20.0 * u(rng);
  fx.ref_feats = random_tensor({f, n, n}, rng);
  for (int s = 0; s < 2; ++s) fx.src_feats.push_back(random_tensor({f, n, n}, rng));
  return fx;
}

inline std::vector<GradCase> gradient_cases(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<GradCase> cases;
  auto w_like = [&](const Shape& s) { return random_tensor(s, rng); };

  {
    const Tensor w = w_like({3, 7, 7});
    cases.push_back({"conv2d", [w](Tape&, const std::vector<Var>& v) {
                       return weighted_sum(conv2d(v[0], v[1], v[2], 1, 1), w);
                     },
                     {random_tensor({2, 7, 7}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)}});
  }
  {
    const Tensor w = w_like({2, 4, 4});
    cases.push_back({"conv2d_stride2", [w](Tape&, const std::vector<Var>& v) {
                       return weighted_sum(conv2d(v[0], v[1], v[2], 2, 2), w);
                     },
                     {random_tensor({2, 8, 8}, rng), random_tensor({2, 2, 5, 5}, rng), random_tensor({2}, rng)}});
  }
  {
    const Tensor w = w_like({2, 3, 4, 4});
    cases.push_back({"conv3d", [w](Tape&, const std::vector<Var>& v) {
                       return weighted_sum(conv3d(v[0], v[1], v[2], 1, 1), w);
                     },
                     {random_tensor({2, 3, 4, 4}, rng), random_tensor({2, 2, 3, 3, 3}, rng), random_tensor({2}, rng)}});
  }
  {
    const Tensor w = w_like({5, 3, 4});
    cases.push_back({"softmax", [w](Tape&, const std::vector<Var>& v) { return weighted_sum(softmax_channel(v[0]), w); },
                     {random_tensor({5, 3, 4}, rng, -2.0, 2.0)}});
  }
  {
    const Tensor w = w_like({2, 12});
    cases.push_back({"bilinear_sample", [w](Tape&, const std::vector<Var>& v) {
                       return weighted_sum(bilinear_sample(v[0], v[1]), w);
                     },
                     {random_tensor({2, 6, 7}, rng), random_tensor({12, 2}, rng, -0.5, 6.5)}});
  }
  {
    const Tensor w = w_like({2, 8, 8});
    cases.push_back({"bilinear_resize", [w](Tape&, const std::vector<Var>& v) {
                       return weighted_sum(bilinear_resize(v[0], 8, 8), w);
                     },
                     {random_tensor({2, 4, 4}, rng)}});
  }
  {
    const Tensor w = w_like({2, 6, 8});
    cases.push_back({"nearest_upsample2x", [w](Tape&, const std::vector<Var>& v) {
                       return weighted_sum(nearest_upsample2x(v[0]), w);
                     },
                     {random_tensor({2, 3, 4}, rng)}});
  }
  {
    const Tensor w = w_like({3, 2, 5});
    cases.push_back({"normalize_channels", [w](Tape&, const std::vector<Var>& v) {
                       return weighted_sum(normalize_channels(v[0]), w);
                     },
                     {random_tensor({3, 2, 5}, rng)}});
  }
  {
    const Tensor w = w_like({6, 6});
    cases.push_back({"propagate_learned", [w](Tape&, const std::vector<Var>& v) {
                       return weighted_sum(propagate_learned(v[0], softmax_channel(v[1])), w);
                     },
                     {random_tensor({6, 6}, rng, 400.0, 600.0), random_tensor({9, 6, 6}, rng, -2.0, 2.0)}});
  }
  {
    const Tensor w = w_like({8, 8});
    DepthHypotheses hyps = sample_hypotheses(DepthRange(400.0, 700.0), 6);
    SparseGrid grid{8, 8, 0, 0};
    cases.push_back({"soft_argmax", [w, hyps, grid](Tape&, const std::vector<Var>& v) {
                       return weighted_sum(soft_argmax_depth(softmax_channel(v[0]), hyps, grid).values, w);
                     },
                     {random_tensor({6, 4, 4}, rng, -2.0, 2.0)}});
  }
  {
    GNFixture fx = gn_fixture(rng, 3, 8);
    const CameraView ref_q = fx.ref;
    const std::vector<CameraView> srcs = fx.srcs;
    DepthHypotheses hyps = sample_hypotheses(DepthRange(450.0, 550.0), 4);
    const Tensor w = w_like({3, 4, 4, 4});
    cases.push_back({"cost_volume", [=](Tape&, const std::vector<Var>& v) {
                       return weighted_sum(build_sparse_cost_volume(v[0], {v[1], v[2]}, ref_q, srcs, hyps).data, w);
                     },
                     {fx.ref_feats, fx.src_feats[0], fx.src_feats[1]}});
  }
  {
    GNFixture fx = gn_fixture(rng, 3, 8);
    const CameraView ref = fx.ref;
    const std::vector<CameraView> srcs = fx.srcs;
    const Tensor w = w_like({8, 8});
    GNConfig cfg;
    cfg.max_step_fraction = 0.0;
    cases.push_back({"gauss_newton", [=](Tape&, const std::vector<Var>& v) {
                       return weighted_sum(refine_depth_map(v[0], v[1], {v[2], v[3]}, ref, srcs, cfg).depth, w);
                     },
                     {fx.depth, fx.ref_feats, fx.src_feats[0], fx.src_feats[1]}});
  }
  {
    // Both terms of the training loss: quarter-res propagated and half-res refined.
    const Tensor tq = random_tensor({4, 4}, rng, 480.0, 520.0);
    const Tensor th = random_tensor({8, 8}, rng, 480.0, 520.0);
    Mask mq(16, 1), mh(64, 1);
    mq[3] = 0;
    mh[10] = 0;
    cases.push_back({"depth_loss", [=](Tape&, const std::vector<Var>& v) {
                       return add(l1_loss_masked(v[0], tq, mq), scale(l1_loss_masked(v[1], th, mh), 0.7));
                     },
                     {random_tensor({4, 4}, rng, 440.0, 560.0), random_tensor({8, 8}, rng, 440.0, 560.0)}});
  }
  {
    const Tensor w = w_like({6, 3, 3});
    cases.push_back({"elementwise", [w](Tape&, const std::vector<Var>& v) {
                       Var a = relu(add(v[0], scale(v[1], 0.5)));
                       Var b = concat_channels(mul(a, v[1]), sub(v[0], v[1]));
                       return add(weighted_sum(concat_channels(b, v[0]), w), mean(v[0]));
                     },
                     {random_tensor({2, 3, 3}, rng), random_tensor({2, 3, 3}, rng)}});
  }
  return cases;
}

inline std::vector<Outcome> check_gradients(std::uint64_t seed = 11, double tolerance = 1e-4) {
  std::vector<Outcome> out;
  for (const auto& c : gradient_cases(seed)) {
    const GradCheckResult r = gradient_check(c.f, c.inputs);
    const bool enough = r.checked > 0 && r.skipped * 4 <= r.checked + r.skipped;
    Outcome o{"gradient/" + c.name, r.max_rel_error < tolerance && enough,
              fmt("max rel err %.2e", r.max_rel_error) + ", checked " + std::to_string(r.checked) + ", kinks skipped " +
                  std::to_string(r.skipped)};
    out.push_back(std::move(o));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Invariants
// ---------------------------------------------------------------------------

/// One GN step with eps = 0 on residuals r(d) = a d + b reaches the least-squares
/// minimiser d* = -(a.b)/(a.a).
inline Outcome check_gn_exactness(std::size_t cases, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0), depth(400.0, 800.0);
  std::uniform_int_distribution<int> len(1, 24);
  double worst = 0.0;
  for (std::size_t i = 0; i < cases; ++i) {
    const int m = len(rng);
    Eigen::VectorXd a(m), b(m);
    for (int k = 0; k < m; ++k) a[k] = u(rng);
    const double target = depth(rng);
    for (int k = 0; k < m; ++k) b[k] = -a[k] * target + 0.1 * u(rng);
    const double d_star = -a.dot(b) / a.dot(a);
    const double d0 = depth(rng);
    const Eigen::VectorXd r = a * d0 + b;
    const auto delta = gn_step(r, a, 0.0);
    if (!delta) return {"gn_exactness", false, "singular step"};
    worst = std::max(worst, std::abs(d0 + *delta - d_star));
  }
  return {"gn_exactness", worst < 1e-10, fmt("max |d - d*| = %.2e mm", worst) + " over " + std::to_string(cases) + " cases"};
}

/// Uniform weights equal a box filter; bilateral with a constant guide equals
/// a normalised Gaussian spatial filter (both clamp-to-edge).
inline std::vector<Outcome> check_propagation_equivalences(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Outcome> out;
  const std::size_t h = 9, w = 11;
  const Tensor depth = random_tensor({h, w}, rng, 400.0, 700.0);
  for (std::size_t k : {3u, 5u}) {
    const long long r = static_cast<long long>(k / 2);
    Tape tape;
    const Var got = propagate_learned(tape.constant(depth), tape.constant(Tensor({k * k, h, w}, 1.0 / static_cast<double>(k * k))));
    double worst = 0.0;
    for (long long y = 0; y < static_cast<long long>(h); ++y)
      for (long long x = 0; x < static_cast<long long>(w); ++x) {
        double s = 0.0;
        for (long long dy = -r; dy <= r; ++dy)
          for (long long dx = -r; dx <= r; ++dx)
            s += depth(detail::clamp_index(y + dy, h), detail::clamp_index(x + dx, w));
        worst = std::max(worst, std::abs(got.value()(y, x) - s / static_cast<double>(k * k)));
      }
    out.push_back({"propagation/box_k" + std::to_string(k), worst <= 1e-12, fmt("max diff %.2e", worst)});
  }
  {
    PropagationConfig cfg;
    cfg.mode = PropagationMode::Bilateral;
    cfg.k = 5;
    cfg.sigma_spatial = 1.3;
    const Tensor got = joint_bilateral(depth, Tensor({3, h, w}, 0.4), cfg);
    double worst = 0.0;
    const long long r = 2;
    for (long long y = 0; y < static_cast<long long>(h); ++y)
      for (long long x = 0; x < static_cast<long long>(w); ++x) {
        double num = 0.0, z = 0.0;
        for (long long dy = -r; dy <= r; ++dy)
          for (long long dx = -r; dx <= r; ++dx) {
            const double g = std::exp(-static_cast<double>(dx * dx + dy * dy) / (2.0 * 1.3 * 1.3));
            num += g * depth(detail::clamp_index(y + dy, h), detail::clamp_index(x + dx, w));
            z += g;
          }
        worst = std::max(worst, std::abs(got(y, x) - num / z));
      }
    out.push_back({"propagation/bilateral_constant_guide", worst <= 1e-10, fmt("max diff %.2e", worst)});
  }
  return out;
}

struct ReprojectionReport {
  double max_rel_error = 0.0;
  std::size_t compared = 0;
  std::size_t occluded = 0;
};

/// Every GT pixel of view a transferred into view b lands where a ray cast
/// from b's centre through the transferred pixel hits the surface at the
/// transferred depth. Hits closer than the transferred point are occlusions
/// and only counted.
inline ReprojectionReport gt_reprojection(const SceneSpec& spec, const std::vector<RenderedView>& views) {
  ReprojectionReport rep;
  for (std::size_t a = 0; a < views.size(); ++a)
    for (std::size_t b = 0; b < views.size(); ++b) {
      if (a == b) continue;
      const CameraView& va = views[a].view;
      const CameraView& vb = views[b].view;
      const ViewTransfer transfer(va, vb);
      const Mat3 rt = vb.pose.rotation().transpose();
      const Mat3 kinv = vb.intrinsics.inverse();
      const Tensor& depth = views[a].depth;
      for (std::size_t y = 0; y < depth.dim(0); ++y)
        for (std::size_t x = 0; x < depth.dim(1); ++x) {
          if (!(depth(y, x) > 0.0)) continue;
          const Reprojection rp = transfer.apply(Vec2(static_cast<double>(x), static_cast<double>(y)), depth(y, x));
          if (!rp.in_front) continue;
          // Camera-frame direction with z = 1, so the ray parameter is the depth.
          const Vec3 dir = rt * (kinv * Vec3(rp.pixel.x(), rp.pixel.y(), 1.0));
          const auto t = intersect(spec.surface, vb.pose.center(), dir);
          if (!t) continue;
          const double rel = (*t - rp.z) / rp.z;
          if (rel < -1e-6) {
            ++rep.occluded;
            continue;
          }
          rep.max_rel_error = std::max(rep.max_rel_error, std::abs(rel));
          ++rep.compared;
        }
    }
  return rep;
}

/// Analytic d p'/d d against central differences with step h mm.
inline Outcome check_reproject_jacobian(std::size_t rigs, std::uint64_t seed, double h = 1e-3) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  double worst = 0.0;
  std::size_t used = 0;
  while (used < rigs) {
    CameraView ref, src;
    ref.intrinsics = Intrinsics(80.0 + 40.0 * u(rng), 80.0 + 40.0 * u(rng), 32.0 + 4.0 * u(rng), 32.0 + 4.0 * u(rng));
    src.intrinsics = Intrinsics(80.0 + 40.0 * u(rng), 80.0 + 40.0 * u(rng), 32.0 + 4.0 * u(rng), 32.0 + 4.0 * u(rng));
    const Vec3 target(20.0 * u(rng), 20.0 * u(rng), 0.0);
    ref.pose = look_at_pose(Vec3(50.0 * u(rng), 50.0 * u(rng), -600.0), target, Vec3(0.0, -1.0, 0.0));
    src.pose = look_at_pose(Vec3(200.0 * u(rng), 100.0 * u(rng), -600.0 + 50.0 * u(rng)), target, Vec3(0.1 * u(rng), -1.0, 0.0));
    const Vec2 p(32.0 + 30.0 * u(rng), 32.0 + 30.0 * u(rng));
    const double d = 600.0 + 150.0 * u(rng);
    const ReprojectionDerivative j = reproject_jacobian(p, d, ref, src);
    if (!j.valid) continue;
    const Reprojection fp = reproject(p, d + h, ref, src), fm = reproject(p, d - h, ref, src);
    if (!fp.in_front || !fm.in_front) continue;
    const Vec2 fd = (fp.pixel - fm.pixel) / (2.0 * h);
    worst = std::max(worst, (fd - j.first).cwiseAbs().maxCoeff() / std::max(j.first.cwiseAbs().maxCoeff(), 1e-3));
    ++used;
  }
  return {"geometry/reproject_jacobian", worst < 1e-5,
          fmt("max rel err %.2e", worst) + " over " + std::to_string(rigs) + " rigs"};
}

struct FusionChecks {
  bool eta_nested = true;
  bool views_nested = true;
  double gt_rms = 0.0;
  std::string detail;
};

inline bool is_subset(std::vector<PixelRef> a, std::vector<PixelRef> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  return std::includes(b.begin(), b.end(), a.begin(), a.end());
}

/// Nesting over eta and V on noisy depth maps of a rendered scene, plus the
/// cloud-to-surface RMS of fusing exact maps.
inline FusionChecks check_fusion(std::uint64_t seed) {
  SceneSpec spec = toy_scene_spec(0, seed);
  const auto views = render_scene(spec);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 12.0);
  std::vector<FusionView> exact, noisy;
  for (const auto& v : views) {
    Tensor half = subsample(v.depth, 2);
    exact.push_back({DepthMap(half), Tensor(half.shape(), 1.0), v.view});
    for (double& d : half.storage()) d += noise(rng);
    noisy.push_back({DepthMap(half), Tensor(half.shape(), 1.0), v.view});
  }
  FusionChecks r;
  FusionConfig cfg;
  std::vector<PixelRef> prev;
  std::string sizes = "consistent |eta|:";
  bool first = true;
  for (double eta : {0.12, 0.25, 0.5, 1.0, 2.0}) {
    cfg.eta = eta;
    const auto res = fuse_detailed(noisy, cfg);
    if (!first) r.eta_nested = r.eta_nested && is_subset(prev, res.consistent);
    sizes += " " + std::to_string(res.consistent.size());
    prev = res.consistent;
    first = false;
  }
  cfg.eta = 0.5;
  first = true;
  sizes += "; fused |V|:";
  for (std::size_t v : {2u, 3u, 4u}) {
    cfg.min_views = v;
    const auto res = fuse_detailed(noisy, cfg);
    if (!first) r.views_nested = r.views_nested && is_subset(res.origin, prev);
    sizes += " " + std::to_string(res.origin.size());
    prev = res.origin;
    first = false;
  }
  cfg = FusionConfig{};
  const auto gt = fuse_detailed(exact, cfg);
  double sq = 0.0;
  for (const auto& p : gt.cloud.points) sq += std::pow(surface_distance(spec.surface, p), 2);
  r.gt_rms = gt.cloud.empty() ? INFINITY : std::sqrt(sq / static_cast<double>(gt.cloud.size()));
  r.detail = sizes + fmt("; GT cloud RMS %.2e mm", r.gt_rms) + " over " + std::to_string(gt.cloud.size()) +
             " points of " + std::to_string(gt.filtered.size()) + " filtered";
  return r;
}

/// Everything `fastmvs check` runs: the gradient suite plus invariant groups.
inline std::vector<Outcome> run_check_suite(std::uint64_t seed = 11) {
  std::vector<Outcome> out = check_gradients(seed);
  out.push_back(check_gn_exactness(1000, seed));
  for (auto& o : check_propagation_equivalences(seed)) out.push_back(std::move(o));
  out.push_back(check_reproject_jacobian(1000, seed));
  for (std::size_t variant = 0; variant < 3; ++variant) {
    const SceneSpec spec = toy_scene_spec(variant, seed);
    const ReprojectionReport r = gt_reprojection(spec, render_scene(spec));
    out.push_back({"geometry/gt_reprojection_" + std::to_string(variant), r.compared > 0 && r.max_rel_error < 1e-9,
                   fmt("max relative depth error %.2e", r.max_rel_error) + " over " + std::to_string(r.compared) +
                       " transfers, " + std::to_string(r.occluded) + " occluded"});
  }
  {
    const FusionChecks f = check_fusion(seed);
    out.push_back({"fusion/monotonicity", f.eta_nested && f.views_nested && f.gt_rms < 1e-3, f.detail});
  }
  return out;
}

}  // namespace fastmvs::verify
