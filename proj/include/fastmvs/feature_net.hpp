#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "fastmvs/autodiff.hpp"
#include "fastmvs/optim.hpp"

namespace fastmvs {

struct ConvLayerSpec {
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t channels = 8;
  bool relu = true;  // "ConvBR" layers: batch norm replaced by the conv bias
};

/// Ordered layer list of a plain 2-D conv stack. Padding is kernel/2.
struct NetSpec {
  std::vector<ConvLayerSpec> layers;

  std::size_t downsampling() const {
    std::size_t f = 1;
    for (const auto& l : layers) f *= l.stride;
    return f;
  }
};

inline std::size_t scaled_width(std::size_t base_channels, double width_scale) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(base_channels * width_scale)));
}

/// The shared 8-layer trunk (Conv_0 .. Conv_7): two stride-2 stages, output at
/// quarter resolution. width_scale = 1 gives 8/16/32 channels.
inline NetSpec feature_trunk_spec(double width_scale) {
  auto c = [&](std::size_t n) { return scaled_width(n, width_scale); };
  return NetSpec{{
      {3, 1, c(8), true},
      {3, 1, c(8), true},
      {5, 2, c(16), true},
      {3, 1, c(16), true},
      {3, 1, c(16), true},
      {5, 2, c(32), true},
      {3, 1, c(32), true},
      {3, 1, c(32), false},
  }};
}

inline constexpr std::size_t kHalfResTap = 4;     // Conv_4
inline constexpr std::size_t kQuarterResTap = 7;  // Conv_7

/// Trunk followed by Conv_8 and the k*k weight layer.
inline NetSpec prop_weight_spec(double width_scale, std::size_t k) {
  NetSpec spec = feature_trunk_spec(width_scale);
  spec.layers.push_back({3, 1, scaled_width(16, width_scale), false});
  spec.layers.push_back({3, 1, k * k, false});
  return spec;
}

inline void validate_spec(const NetSpec& spec, std::size_t in_channels) {
  require(!spec.layers.empty(), ErrorKind::Config, "empty network spec");
  for (const auto& l : spec.layers) {
    require(l.kernel % 2 == 1, ErrorKind::Config, "kernels must have odd size");
    require(l.stride == 1 || l.stride == 2, ErrorKind::Config, "strides must be 1 or 2");
    require(l.channels >= 1, ErrorKind::Config, "layers need at least one channel");
  }
  require(in_channels >= 1, ErrorKind::Config, "input must have channels");
}

/// A stack of 2-D convolutions whose parameters live in an external store.
class ConvNet {
 public:
  ConvNet() = default;

  ConvNet(NetSpec spec, const std::string& prefix, std::size_t in_channels, ParameterStore& store,
          std::mt19937_64& rng)
      : spec_(std::move(spec)) {
    validate_spec(spec_, in_channels);
    std::size_t cin = in_channels;
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
      const auto& l = spec_.layers[i];
      const std::size_t kk = l.kernel * l.kernel;
      Tensor w = glorot_uniform({l.channels, cin, l.kernel, l.kernel}, cin * kk, l.channels * kk, rng);
      weight_.push_back(store.add(prefix + ".conv" + std::to_string(i) + ".weight", std::move(w)));
      bias_.push_back(store.add(prefix + ".conv" + std::to_string(i) + ".bias", Tensor({l.channels})));
      cin = l.channels;
    }
  }

  const NetSpec& spec() const { return spec_; }
  std::size_t layer_count() const { return spec_.layers.size(); }
  std::size_t out_channels(std::size_t layer) const { return spec_.layers.at(layer).channels; }
  std::size_t weight_index(std::size_t layer) const { return weight_.at(layer); }
  std::size_t bias_index(std::size_t layer) const { return bias_.at(layer); }

  /// Runs the stack and returns the activations after each requested layer.
  std::vector<Var> forward(Tape& tape, ParameterStore& store, Var input,
                           const std::vector<std::size_t>& taps) const {
    std::vector<Var> outputs(taps.size());
    const std::size_t last = taps.empty() ? 0 : *std::max_element(taps.begin(), taps.end());
    require(last < spec_.layers.size(), ErrorKind::Config, "tap beyond last layer");
    Var x = input;
    for (std::size_t i = 0; i <= last; ++i) {
      const auto& l = spec_.layers[i];
      x = conv2d(x, tape.parameter(store[weight_[i]]), tape.parameter(store[bias_[i]]), l.stride,
                 l.kernel / 2);
      if (l.relu) x = relu(x);
      for (std::size_t t = 0; t < taps.size(); ++t)
        if (taps[t] == i) outputs[t] = x;
    }
    return outputs;
  }

  Var forward(Tape& tape, ParameterStore& store, Var input) const {
    return forward(tape, store, input, {spec_.layers.size() - 1}).front();
  }

 private:
  NetSpec spec_;
  std::vector<std::size_t> weight_;
  std::vector<std::size_t> bias_;
};

inline void require_divisible_by_8(const Tensor& image, const char* what) {
  require_rank(image, 3, what);
  require(image.dim(1) % 8 == 0 && image.dim(2) % 8 == 0, ErrorKind::Config,
          std::string(what) + ": image size " + shape_string(image.shape()) +
              " must be divisible by 8");
}

/// Matching features at quarter resolution (Conv_7 of the trunk).
class MatchFeatureNet {
 public:
  MatchFeatureNet() = default;
  MatchFeatureNet(double width_scale, ParameterStore& store, std::mt19937_64& rng)
      : net_(feature_trunk_spec(width_scale), "match", 3, store, rng) {}

  std::size_t channels() const { return net_.out_channels(kQuarterResTap); }
  const ConvNet& net() const { return net_; }

  Var extract(Tape& tape, ParameterStore& store, Var image) const {
    require_divisible_by_8(image.value(), "extract_match_features");
    return net_.forward(tape, store, image);
  }

 private:
  ConvNet net_;
};

/// Per-pixel k*k propagation weights at quarter resolution, softmax-normalised
/// over the channel axis.
class PropWeightNet {
 public:
  PropWeightNet() = default;
  PropWeightNet(double width_scale, std::size_t k, ParameterStore& store, std::mt19937_64& rng)
      : k_(check_window(k)), net_(prop_weight_spec(width_scale, k), "prop", 3, store, rng) {}

  std::size_t window() const { return k_; }
  const ConvNet& net() const { return net_; }

  Var predict(Tape& tape, ParameterStore& store, Var image) const {
    require_divisible_by_8(image.value(), "predict_prop_weights");
    return softmax_channel(net_.forward(tape, store, image));
  }

  static std::size_t check_window(std::size_t k) {
    require(k >= 3 && k % 2 == 1, ErrorKind::Config,
            "propagation window must be odd and >= 3, got " + std::to_string(k));
    return k;
  }

 private:
  std::size_t k_ = 3;
  ConvNet net_;
};

struct FeaturePyramid {
  Var quarter_res;  // Conv_7
  Var half_res;     // [Conv_4, bilinear-upsampled Conv_7]
};

/// Features for the Gauss-Newton layer: Conv_4 (half resolution) concatenated
/// with Conv_7 bilinearly resized onto the Conv_4 grid.
class GNFeatureNet {
 public:
  GNFeatureNet() = default;
  GNFeatureNet(double width_scale, ParameterStore& store, std::mt19937_64& rng)
      : net_(feature_trunk_spec(width_scale), "gn", 3, store, rng) {}

  std::size_t channels() const {
    return net_.out_channels(kHalfResTap) + net_.out_channels(kQuarterResTap);
  }
  const ConvNet& net() const { return net_; }

  FeaturePyramid extract(Tape& tape, ParameterStore& store, Var image) const {
    require_divisible_by_8(image.value(), "extract_gn_features");
    auto taps = net_.forward(tape, store, image, {kHalfResTap, kQuarterResTap});
    const Tensor& half = taps[0].value();
    FeaturePyramid out;
    out.quarter_res = taps[1];
    out.half_res = concat_channels(taps[0], bilinear_resize(taps[1], half.dim(1), half.dim(2)));
    return out;
  }

 private:
  ConvNet net_;
};

}  // namespace fastmvs
