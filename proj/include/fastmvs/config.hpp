#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fastmvs/error.hpp"
#include "fastmvs/fusion.hpp"
#include "fastmvs/gauss_newton.hpp"
#include "fastmvs/optim.hpp"
#include "fastmvs/propagation.hpp"

namespace fastmvs {

/// Every tunable of the toolkit. Each field has a one-to-one `--kebab-case`
/// flag and config-file key in the CLI.
struct RunConfig {
  // Paths.
  std::string scene_dir = "scene";
  std::string checkpoint = "model.ckpt";
  std::string output_dir = "out";

  // Model shape.
  double width_scale = 0.5;  // 1.0 gives 8/16/32-channel trunks
  std::size_t reg_hidden = 16;
  std::size_t reg_layers = 2;  // hidden 3-D conv layers before the logit layer
  std::size_t prop_k = 3;

  // Depth pipeline.
  std::size_t planes = 8;
  std::size_t sources = 2;  // source views per reference
  int gn_iterations = 1;
  double gn_damping = 1e-6;
  double gn_max_step = 0.05;  // fraction of the depth range; 0 disables
  std::size_t gn_min_views = 1;
  bool random_init = false;
  bool trace = false;

  // Fusion.
  double prob_thresh = 0.5;
  double eta = 0.12;
  std::size_t fusion_views = 3;

  // Training.
  double lr = 0.0005;
  double lr_decay = 0.9;
  int lr_decay_every = 2;
  double rms_decay = 0.9;
  double rms_eps = 1e-8;
  double lambda = 1.0;
  int pretrain_epochs = 4;
  int e2e_epochs = 12;
  std::uint64_t seed = 7;
  std::size_t train_scenes = 3;

  // Synthetic scenes.
  std::size_t image_size = 64;
  std::size_t views = 5;
  std::size_t scene_index = 0;  // surface/texture variant for `synth`

  void validate() const {
    require(width_scale > 0.0, ErrorKind::Config, "width-scale must be positive");
    require(reg_hidden >= 1, ErrorKind::Config, "reg-hidden must be >= 1");
    require(prop_k >= 3 && prop_k % 2 == 1, ErrorKind::Config, "prop-k must be odd and >= 3");
    require(planes >= 2, ErrorKind::Config, "planes must be >= 2");
    require(sources >= 1, ErrorKind::Config, "sources must be >= 1");
    gn_config().validate();
    fusion_config().validate();
    require(lr > 0.0 && lr_decay > 0.0 && lr_decay_every > 0, ErrorKind::Config, "bad learning-rate schedule");
    require(rms_decay >= 0.0 && rms_decay < 1.0 && rms_eps > 0.0, ErrorKind::Config, "bad RMSProp settings");
    require(lambda >= 0.0, ErrorKind::Config, "lambda must be >= 0");
    require(pretrain_epochs >= 0 && e2e_epochs >= 0, ErrorKind::Config, "epoch counts must be >= 0");
    require(image_size >= 8 && image_size % 8 == 0, ErrorKind::Config, "image-size must be a multiple of 8");
    require(views >= 2 && sources < views, ErrorKind::Config, "need views > sources >= 1");
  }

  GNConfig gn_config() const {
    GNConfig g;
    g.iterations = gn_iterations;
    g.damping = gn_damping;
    g.min_views = gn_min_views;
    g.max_step_fraction = gn_max_step;
    return g;
  }

  FusionConfig fusion_config() const {
    FusionConfig f;
    f.prob_thresh = prob_thresh;
    f.eta = eta;
    f.min_views = fusion_views;
    return f;
  }

  RmsPropConfig rmsprop(int epoch) const {
    return {scheduled_learning_rate(lr, lr_decay, lr_decay_every, epoch), rms_decay, rms_eps};
  }
};

}  // namespace fastmvs
