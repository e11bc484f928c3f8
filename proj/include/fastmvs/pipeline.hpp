#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "fastmvs/autodiff.hpp"
#include "fastmvs/config.hpp"
#include "fastmvs/cost_volume.hpp"
#include "fastmvs/depth_map.hpp"
#include "fastmvs/feature_net.hpp"
#include "fastmvs/fusion.hpp"
#include "fastmvs/gauss_newton.hpp"
#include "fastmvs/io.hpp"
#include "fastmvs/optim.hpp"
#include "fastmvs/propagation.hpp"
#include "fastmvs/scene.hpp"

namespace fastmvs {

/// All trainable networks of the pipeline sharing one parameter store.
struct Model {
  ParameterStore store;
  MatchFeatureNet match;
  CostRegularizer reg;
  PropWeightNet prop;
  GNFeatureNet gn;

  Model() = default;

  explicit Model(const RunConfig& cfg) {
    std::mt19937_64 rng(cfg.seed);
    match = MatchFeatureNet(cfg.width_scale, store, rng);
    reg = CostRegularizer(match.channels(), std::vector<std::size_t>(cfg.reg_layers, cfg.reg_hidden), store, rng);
    prop = PropWeightNet(cfg.width_scale, cfg.prop_k, store, rng);
    gn = GNFeatureNet(cfg.width_scale, store, rng);
  }

  /// Indices of the parameters owned by the Gauss-Newton feature network.
  std::vector<std::size_t> gn_parameters() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < store.size(); ++i)
      if (store[i].name.rfind("gn.", 0) == 0) out.push_back(i);
    return out;
  }
};

struct PipelineOptions {
  std::size_t planes = 8;
  GNConfig gn;
  bool refine = true;  // false stops after propagation (pretraining)

  static PipelineOptions from(const RunConfig& cfg) {
    PipelineOptions o;
    o.planes = cfg.planes;
    o.gn = cfg.gn_config();
    return o;
  }
};

/// Per-stage outputs of one reference view. Optional stages are present iff
/// they were executed.
struct PipelineTrace {
  SparseDepthMap sparse;        // quarter resolution, grid cells only
  Var densified;                // quarter
  Tensor confidence;            // quarter, densified like the depth
  Var propagated;               // quarter
  std::optional<Var> upsampled;  // half
  std::optional<Var> refined;    // half
  Mask updated;
  DeltaStats delta_stats;
  std::vector<std::pair<std::string, double>> timings_ms;
  Mask flagged_cells;
};

namespace detail {

template <class F>
auto run_stage(const char* name, std::vector<std::pair<std::string, double>>& timings, F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  try {
    auto r = f();
    timings.emplace_back(name, std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    return r;
  } catch (const ParseError&) {
    throw;
  } catch (const Error& e) {
    throw Error(e.kind(), std::string(name) + ": " + e.what());
  }
}

inline std::vector<CameraView> scaled(const std::vector<CameraView>& views, double s) {
  std::vector<CameraView> out;
  for (const auto& v : views) out.push_back(scaled_camera(v, s));
  return out;
}

}  // namespace detail

/// Images enter the networks centred on zero.
inline Tensor network_input(const Tensor& image) {
  Tensor t = image;
  for (double& v : t.storage()) v -= 0.5;
  return t;
}

/// Full depth pipeline for one bundle on the given tape: matching features,
/// sparse cost volume, regularisation, soft argmax, nearest densification,
/// learned propagation, 2x nearest upsampling, Gauss-Newton refinement.
inline PipelineTrace estimate_depth(Tape& tape, Model& model, const ViewBundle& bundle,
                                    const PipelineOptions& opt) {
  require(!bundle.sources.empty(), ErrorKind::Config, "bundle has no source views");
  PipelineTrace tr;
  auto& tm = tr.timings_ms;
  Var ref_img = tape.constant(network_input(bundle.reference.image));
  std::vector<Var> src_img;
  for (const auto& s : bundle.sources) {
    require(s.image.same_shape(bundle.reference.image), ErrorKind::Dimension,
            "source image " + s.id + " differs in size from the reference");
    src_img.push_back(tape.constant(network_input(s.image)));
  }

  const auto [ref_f, src_f] = detail::run_stage("extract_match_features", tm, [&] {
    std::pair<Var, std::vector<Var>> r;
    r.first = model.match.extract(tape, model.store, ref_img);
    for (Var s : src_img) r.second.push_back(model.match.extract(tape, model.store, s));
    return r;
  });
  const std::size_t qh = ref_f.value().dim(1), qw = ref_f.value().dim(2);
  const CameraView ref_q = scaled_camera(bundle.reference, static_cast<double>(qw) / static_cast<double>(bundle.reference.width()));
  const auto src_q = detail::scaled(bundle.sources, static_cast<double>(qw) / static_cast<double>(bundle.reference.width()));
  const DepthHypotheses hyps = sample_hypotheses(bundle.reference.depth_range, opt.planes);

  const CostVolume cv = detail::run_stage("build_sparse_cost_volume", tm, [&] {
    return build_sparse_cost_volume(ref_f, src_f, ref_q, src_q, hyps);
  });
  tr.flagged_cells = cv.flagged;
  const Var prob = detail::run_stage("regularize", tm, [&] { return model.reg.regularize(tape, model.store, cv.data); });
  tr.sparse = detail::run_stage("soft_argmax_depth", tm, [&] { return soft_argmax_depth(prob, hyps, cv.grid); });
  tr.densified = detail::run_stage("densify_nearest", tm, [&] { return densify_nearest(tr.sparse); });
  tr.confidence = densify_confidence(tr.sparse);
  tr.propagated = detail::run_stage("propagate_learned", tm, [&] {
    const Var w = model.prop.predict(tape, model.store, ref_img);
    require(w.value().dim(1) == qh && w.value().dim(2) == qw, ErrorKind::Dimension,
            "propagation weights resolution differs from the depth map");
    return propagate_learned(tr.densified, w);
  });
  if (!opt.refine) return tr;

  tr.upsampled = detail::run_stage("nearest_upsample2x", tm, [&] { return nearest_upsample2x(tr.propagated); });
  const RefinementResult ref = detail::run_stage("refine_depth_map", tm, [&] {
    const FeaturePyramid rp = model.gn.extract(tape, model.store, ref_img);
    std::vector<Var> sp;
    for (Var s : src_img) sp.push_back(model.gn.extract(tape, model.store, s).half_res);
    const std::size_t hw = rp.half_res.value().dim(2);
    const double s = static_cast<double>(hw) / static_cast<double>(bundle.reference.width());
    return refine_depth_map(*tr.upsampled, rp.half_res, sp, scaled_camera(bundle.reference, s),
                            detail::scaled(bundle.sources, s), opt.gn);
  });
  tr.refined = ref.depth;
  tr.updated = ref.updated_mask;
  tr.delta_stats = ref.delta_stats;
  return tr;
}

/// Mean absolute errors of the pipeline stages, all compared at half
/// resolution after nearest upsampling of the quarter-resolution maps.
struct StageErrors {
  double densified = 0.0;
  double propagated = 0.0;
  double refined = 0.0;
};

inline Tensor upsample_nearest(const Tensor& t) {
  Tape tape;
  return nearest_upsample2x(tape.constant(t)).value();
}

inline StageErrors stage_errors(const PipelineTrace& tr, const Tensor& gt_full) {
  const Tensor gt_half = subsample(gt_full, 2);
  StageErrors e;
  e.densified = mean_abs_error(upsample_nearest(tr.densified.value()), gt_half);
  e.propagated = mean_abs_error(upsample_nearest(tr.propagated.value()), gt_half);
  if (tr.refined) e.refined = mean_abs_error(tr.refined->value(), gt_half);
  return e;
}

inline PipelineTrace infer(Model& model, const ViewBundle& bundle, const PipelineOptions& opt, Tape& tape) {
  tape.set_grad_enabled(false);
  return estimate_depth(tape, model, bundle, opt);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Loss = L1(propagated, GT quarter) + lambda * L1(refined, GT half), each a
/// mean over pixels with valid ground truth. The refined term is absent when
/// the trace stops before refinement.
struct LossTerms {
  Var total;
  double propagated = 0.0;
  double refined = 0.0;
};

inline Mask positive_mask(const Tensor& t) {
  Mask m(t.numel());
  for (std::size_t i = 0; i < t.numel(); ++i) m[i] = t[i] > 0.0;
  return m;
}

inline LossTerms depth_loss(const PipelineTrace& tr, const Tensor& gt_full, double lambda) {
  const std::size_t qf = gt_full.dim(1) / tr.propagated.value().dim(1);
  const Tensor gt_q = subsample(gt_full, qf);
  LossTerms l;
  l.total = l1_loss_masked(tr.propagated, gt_q, positive_mask(gt_q));
  l.propagated = l.total.value().item();
  if (tr.refined) {
    const Tensor gt_h = subsample(gt_full, qf / 2);
    const Var r = l1_loss_masked(*tr.refined, gt_h, positive_mask(gt_h));
    l.refined = r.value().item();
    l.total = add(l.total, scale(r, lambda));
  }
  return l;
}

struct EpochLog {
  int epoch = 0;
  bool end_to_end = false;
  double learning_rate = 0.0;
  double objective = 0.0;  // mean optimised loss
  double full_loss = 0.0;  // mean propagated + lambda * refined, also during pretraining
};

struct TrainingData {
  std::vector<ViewBundle> bundles;
};

inline TrainingData bundles_of(const std::vector<SceneData>& scenes) {
  TrainingData d;
  for (const auto& s : scenes)
    for (const auto& p : s.pairs) {
      ViewBundle b = make_bundle(s, p);
      require(b.gt_depth.has_value(), ErrorKind::Data, "training view " + b.reference.id + " has no ground truth");
      d.bundles.push_back(std::move(b));
    }
  require(!d.bundles.empty(), ErrorKind::Data, "no training bundles");
  return d;
}

/// Two-stage schedule: pretrain_epochs without the refined term, then
/// end-to-end epochs. One RMSProp step per bundle, bundles in fixed order.
inline std::vector<EpochLog> train(Model& model, const std::vector<SceneData>& scenes, const RunConfig& cfg,
                                   const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  const TrainingData data = bundles_of(scenes);
  PipelineOptions opt = PipelineOptions::from(cfg);
  std::vector<EpochLog> logs;
  const int total = cfg.pretrain_epochs + cfg.e2e_epochs;
  for (int epoch = 0; epoch < total; ++epoch) {
    EpochLog log;
    log.epoch = epoch;
    log.end_to_end = epoch >= cfg.pretrain_epochs;
    const RmsPropConfig rms = cfg.rmsprop(epoch);
    log.learning_rate = rms.learning_rate;
    for (std::size_t b = 0; b < data.bundles.size(); ++b) {
      const ViewBundle& bundle = data.bundles[b];
      Tape tape;
      PipelineTrace tr = estimate_depth(tape, model, bundle, [&] {
        PipelineOptions o = opt;
        o.refine = log.end_to_end;
        return o;
      }());
      LossTerms loss = depth_loss(tr, *bundle.gt_depth, cfg.lambda);
      double refined_term = loss.refined;
      if (!log.end_to_end) {
        // Monitor the refined term without letting it shape the parameters.
        Tape probe;
        probe.set_grad_enabled(false);
        const PipelineTrace full = estimate_depth(probe, model, bundle, opt);
        refined_term = depth_loss(full, *bundle.gt_depth, cfg.lambda).refined;
      }
      const double value = loss.total.value().item();
      if (!std::isfinite(value))
        throw Error(ErrorKind::Divergence, "non-finite loss at epoch " + std::to_string(epoch) + ", view " +
                                               bundle.reference.id + " (propagated term " +
                                               std::to_string(loss.propagated) + ")");
      log.objective += value;
      log.full_loss += loss.propagated + cfg.lambda * refined_term;
      tape.backward(loss.total);
      rmsprop_step(model.store, rms);
    }
    log.objective /= static_cast<double>(data.bundles.size());
    log.full_loss /= static_cast<double>(data.bundles.size());
    logs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return logs;
}

// ---------------------------------------------------------------------------
// Toy scenes
// ---------------------------------------------------------------------------

/// Scene variant `index` of a family: surfaces cycle through plane, sphere and
/// step; tilt, texture and rig offsets come from the seed.
inline SceneSpec toy_scene_spec(std::size_t index, std::uint64_t seed, std::size_t image_size = 64,
                                std::size_t views = 5, std::size_t planes = 8) {
  std::mt19937_64 rng(seed * 1000003ULL + index);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  SceneSpec s;
  s.height = s.width = image_size;
  s.planes = planes;
  s.rig.count = views;
  s.rig.focal = 100.0 * static_cast<double>(image_size) / 64.0;
  s.rig.arc_step_deg = 12.0;
  s.texture.seed = rng();
  s.texture.frequency = 0.07 + 0.02 * u(rng);
  s.rig.target = Vec3(15.0 * u(rng), 15.0 * u(rng), 0.0);
  switch (index % 3) {
    case 0:
      s.surface.kind = SurfaceKind::Plane;
      s.surface.normal = Vec3(0.35 * u(rng), 0.35 * u(rng), -1.0).normalized();
      s.surface.offset = 0.0;
      break;
    case 1:
      s.surface.kind = SurfaceKind::Sphere;
      s.surface.radius = 900.0 + 100.0 * u(rng);
      // Concave bowl seen from inside: keeps the depth spread small.
      s.surface.center = Vec3(0.0, 0.0, -s.surface.radius);
      break;
    default:
      s.surface.kind = SurfaceKind::Step;
      s.surface.near_z = -30.0 - 15.0 * std::abs(u(rng));
      s.surface.far_z = 30.0 + 15.0 * std::abs(u(rng));
      break;
  }
  // Range chosen to hold every variant's visible depths.
  s.depth_min = 470.0;
  s.depth_interval = 320.0 / static_cast<double>(planes - 1);
  return s;
}

inline SceneData make_toy_scene(const SceneSpec& spec, std::size_t sources) {
  const auto views = render_scene(spec);
  return scene_data(views, nearest_pairs(views.size(), sources));
}

}  // namespace fastmvs
