// fastmvs: synthetic scenes, depth estimation, fusion, training, evaluation
// and the verification suite behind one command.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "fastmvs/fastmvs.hpp"
#include "fastmvs/verify.hpp"

namespace fs = std::filesystem;
using namespace fastmvs;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kCheckFailed = 3 };

/// Calls v(key, field, help) for every RunConfig field; the key doubles as the
/// long flag and the config-file key.
template <class Visit>
void visit_fields(RunConfig& c, Visit&& v) {
  v("scene-dir", c.scene_dir, "scene directory (cams/, images/, depths/, pair.txt)");
  v("checkpoint", c.checkpoint, "model checkpoint path");
  v("output-dir", c.output_dir, "where depth maps, traces and clouds go");
  v("width-scale", c.width_scale, "channel width multiplier of the feature nets");
  v("reg-hidden", c.reg_hidden, "hidden channels of the cost regularizer");
  v("reg-layers", c.reg_layers, "hidden 3-D conv layers of the cost regularizer");
  v("prop-k", c.prop_k, "propagation window size k");
  v("planes", c.planes, "depth hypotheses N");
  v("sources", c.sources, "source views per reference");
  v("gn-iterations", c.gn_iterations, "Gauss-Newton iterations");
  v("gn-damping", c.gn_damping, "Gauss-Newton damping epsilon");
  v("gn-max-step", c.gn_max_step, "per-iteration step cap as a fraction of the depth range (0 = off)");
  v("gn-min-views", c.gn_min_views, "source views needed to update a pixel");
  v("random-init", c.random_init, "run depth without a checkpoint");
  v("trace", c.trace, "write a PFM per pipeline stage");
  v("prob-thresh", c.prob_thresh, "photometric filter threshold");
  v("eta", c.eta, "geometric consistency threshold in pixels");
  v("fusion-views", c.fusion_views, "V, consistent views needed including the reference");
  v("lr", c.lr, "initial learning rate");
  v("lr-decay", c.lr_decay, "learning-rate decay factor");
  v("lr-decay-every", c.lr_decay_every, "epochs between decays");
  v("rms-decay", c.rms_decay, "RMSProp decay rho");
  v("rms-eps", c.rms_eps, "RMSProp epsilon");
  v("lambda", c.lambda, "weight of the refined-depth loss term");
  v("pretrain-epochs", c.pretrain_epochs, "epochs without the refined term");
  v("e2e-epochs", c.e2e_epochs, "end-to-end epochs");
  v("seed", c.seed, "seed for scenes and initialisation");
  v("train-scenes", c.train_scenes, "toy scenes used by train");
  v("image-size", c.image_size, "synthetic image size (square)");
  v("views", c.views, "synthetic views per scene");
  v("scene-index", c.scene_index, "synthetic surface variant");
}

/// Flat key=value file; '#' starts a comment. Unknown keys are an error.
void apply_config_file(const std::string& path, RunConfig& cfg) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Config, "cannot open config file " + path);
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r"), e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(path, no, "expected key=value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    bool known = false;
    visit_fields(cfg, [&](const char* name, auto& field, const char*) {
      if (key != name) return;
      known = true;
      if (!CLI::detail::lexical_cast(value, field)) throw ParseError(path, no, "bad value for " + key);
    });
    if (!known) throw ParseError(path, no, "unknown key " + key);
  }
}

std::string pfm_path(const fs::path& dir, const std::string& sub, const std::string& name) {
  fs::create_directories(dir / sub);
  return (dir / sub / (name + ".pfm")).string();
}

Model load_model(const RunConfig& cfg) {
  Model model(cfg);
  if (!cfg.random_init) load_checkpoint(cfg.checkpoint, model.store);
  return model;
}

int cmd_synth(const RunConfig& cfg) {
  const SceneSpec spec = toy_scene_spec(cfg.scene_index, cfg.seed, cfg.image_size, cfg.views, cfg.planes);
  const auto views = render_scene(spec);
  write_scene(cfg.scene_dir, spec, views, nearest_pairs(views.size(), cfg.sources));
  std::printf("wrote %zu views to %s\n", views.size(), cfg.scene_dir.c_str());
  return kOk;
}

int cmd_depth(const RunConfig& cfg) {
  const SceneData scene = load_scene(cfg.scene_dir, cfg.planes);
  Model model = load_model(cfg);
  const PipelineOptions opt = PipelineOptions::from(cfg);
  const fs::path out = cfg.output_dir;
  for (const auto& pair : scene.pairs) {
    const ViewBundle bundle = make_bundle(scene, pair);
    Tape tape;
    const PipelineTrace tr = infer(model, bundle, opt, tape);
    const std::string& name = bundle.reference.id;
    const Tensor& final_depth = tr.refined ? tr.refined->value() : tr.propagated.value();
    write_pfm(pfm_path(out, "depth", name), final_depth);
    write_pfm(pfm_path(out, "confidence", name), tr.confidence);
    if (cfg.trace) {
      write_pfm(pfm_path(out, "trace", name + "_sparse"), tr.sparse.values.value());
      write_pfm(pfm_path(out, "trace", name + "_densified"), tr.densified.value());
      write_pfm(pfm_path(out, "trace", name + "_propagated"), tr.propagated.value());
      if (tr.upsampled) write_pfm(pfm_path(out, "trace", name + "_upsampled"), tr.upsampled->value());
      if (tr.refined) write_pfm(pfm_path(out, "trace", name + "_refined"), tr.refined->value());
    }
    std::printf("%s", name.c_str());
    if (bundle.gt_depth) {
      const StageErrors e = stage_errors(tr, *bundle.gt_depth);
      std::printf("  mae dens %.3f prop %.3f", e.densified, e.propagated);
      if (tr.refined) std::printf(" refined %.3f", e.refined);
    }
    for (const auto& [stage, ms] : tr.timings_ms) std::printf("  %s %.1fms", stage.c_str(), ms);
    std::printf("\n");
  }
  return kOk;
}

std::vector<FusionView> fusion_inputs(const RunConfig& cfg, const SceneData& scene) {
  std::vector<FusionView> views;
  for (const auto& cam : scene.views) {
    const fs::path out = cfg.output_dir;
    const Tensor depth = read_pfm((out / "depth" / (cam.id + ".pfm")).string());
    const Tensor conf = read_pfm((out / "confidence" / (cam.id + ".pfm")).string());
    views.push_back({DepthMap(depth), conf, cam});
  }
  return views;
}

int cmd_fuse(const RunConfig& cfg) {
  const SceneData scene = load_scene(cfg.scene_dir, cfg.planes);
  const FusionResult res = fuse_detailed(fusion_inputs(cfg, scene), cfg.fusion_config());
  const fs::path path = fs::path(cfg.output_dir) / "fused.ply";
  write_ply(path.string(), res.cloud);
  std::printf("%zu of %zu filtered pixels fused -> %s\n", res.cloud.size(), res.filtered.size(), path.c_str());
  return kOk;
}

int cmd_train(const RunConfig& cfg) {
  std::vector<SceneData> scenes;
  for (std::size_t i = 0; i < cfg.train_scenes; ++i)
    scenes.push_back(make_toy_scene(toy_scene_spec(i, cfg.seed, cfg.image_size, cfg.views, cfg.planes), cfg.sources));
  Model model(cfg);
  train(model, scenes, cfg, [](const EpochLog& log) {
    std::printf("epoch %2d %-8s lr %.6f  objective %.4f  loss %.4f\n", log.epoch,
                log.end_to_end ? "e2e" : "pretrain", log.learning_rate, log.objective, log.full_loss);
    std::fflush(stdout);
  });
  save_checkpoint(cfg.checkpoint, model.store);
  std::printf("saved %s\n", cfg.checkpoint.c_str());
  return kOk;
}

/// GT cloud: every valid GT pixel of every view, back-projected.
PointCloud gt_cloud(const SceneData& scene) {
  PointCloud cloud;
  for (std::size_t v = 0; v < scene.views.size(); ++v) {
    if (!scene.gt_depth[v]) continue;
    const Tensor& d = *scene.gt_depth[v];
    const CameraView& cam = scene.views[v];
    for (std::size_t y = 0; y < d.dim(0); ++y)
      for (std::size_t x = 0; x < d.dim(1); ++x) {
        if (!(d(y, x) > 0.0)) continue;
        const Vec2 p(static_cast<double>(x), static_cast<double>(y));
        std::array<std::uint8_t, 3> rgb{};
        for (std::size_t c = 0; c < 3; ++c) rgb[c] = to_byte(cam.image(c, y, x));
        cloud.add(cam.pose.to_world(backproject(p, d(y, x), cam.intrinsics)), rgb);
      }
  }
  return cloud;
}

int cmd_eval(const RunConfig& cfg) {
  const SceneData scene = load_scene(cfg.scene_dir, cfg.planes);
  const PointCloud reference = gt_cloud(scene);
  const PointCloud cloud = read_ply((fs::path(cfg.output_dir) / "fused.ply").string());
  const AccuracyReport r = eval_acc_comp(cloud, reference);
  std::printf("%-12s %10s %10s %10s\n", "points", "Acc.(mm)", "Comp.(mm)", "Overall");
  std::printf("%-12zu %10.4f %10.4f %10.4f\n", cloud.size(), r.accuracy, r.completeness, r.overall);
  return kOk;
}

int cmd_check(const RunConfig& cfg) {
  bool ok = true;
  for (const auto& o : verify::run_check_suite(cfg.seed)) {
    std::printf("%-4s %-40s %s\n", o.pass ? "ok" : "FAIL", o.name.c_str(), o.detail.c_str());
    ok = ok && o.pass;
  }
  return ok ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fastmvs: sparse-to-dense multi-view stereo toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  RunConfig cfg;
  std::string config_file;
  app.add_option("--config", config_file, "key=value file; flags override it");
  visit_fields(cfg, [&](const char* name, auto& field, const char* help) {
    using T = std::decay_t<decltype(field)>;
    if constexpr (std::is_same_v<T, bool>)
      app.add_flag(std::string("--") + name, field, help);
    else
      app.add_option(std::string("--") + name, field, help);
  });
  auto* synth = app.add_subcommand("synth", "render a toy scene to --scene-dir");
  auto* depth = app.add_subcommand("depth", "estimate a depth map per reference view");
  auto* fuse_cmd = app.add_subcommand("fuse", "fuse depth maps into output-dir/fused.ply");
  auto* train_cmd = app.add_subcommand("train", "train on toy scenes and write --checkpoint");
  auto* eval = app.add_subcommand("eval", "accuracy/completeness of fused.ply against GT");
  auto* check = app.add_subcommand("check", "gradient and invariant verification suite");

  // The config file is applied first so that explicit flags win.
  for (int i = 1; i + 1 < argc; ++i)
    if (std::string(argv[i]) == "--config") config_file = argv[i + 1];
  try {
    if (!config_file.empty()) apply_config_file(config_file, cfg);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    cfg.validate();
    if (synth->parsed()) return cmd_synth(cfg);
    if (depth->parsed()) return cmd_depth(cfg);
    if (fuse_cmd->parsed()) return cmd_fuse(cfg);
    if (train_cmd->parsed()) return cmd_train(cfg);
    if (eval->parsed()) return cmd_eval(cfg);
    if (check->parsed()) return cmd_check(cfg);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.kind() == ErrorKind::Config ? kUsage : kData;
  }
  return kUsage;
}
