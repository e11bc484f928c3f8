#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "fastmvs/autodiff.hpp"
#include "fastmvs/camera.hpp"
#include "fastmvs/optim.hpp"

namespace fastmvs {

struct DepthHypotheses {
  std::vector<double> values;  // strictly increasing, mm

  std::size_t size() const { return values.size(); }
  double front() const { return values.front(); }
  double back() const { return values.back(); }
};

/// N planes uniformly spaced over the range, both endpoints included.
inline DepthHypotheses sample_hypotheses(const DepthRange& range, std::size_t n) {
  require(n >= 2, ErrorKind::Config, "need at least two depth hypotheses");
  DepthHypotheses h;
  h.values.resize(n);
  const double step = range.span() / static_cast<double>(n - 1);
  for (std::size_t j = 0; j < n; ++j) h.values[j] = range.min + step * static_cast<double>(j);
  h.values.back() = range.max;
  return h;
}

/// Sparse grid bookkeeping: cells sit on every other pixel of the
/// quarter-resolution map, starting at (row0, col0).
struct SparseGrid {
  std::size_t height = 0;  // quarter-res map size
  std::size_t width = 0;
  std::size_t row0 = 0;
  std::size_t col0 = 0;

  std::size_t rows() const { return (height - row0 + 1) / 2; }
  std::size_t cols() const { return (width - col0 + 1) / 2; }
  std::size_t cells() const { return rows() * cols(); }
  std::size_t pixel_row(std::size_t gy) const { return row0 + 2 * gy; }
  std::size_t pixel_col(std::size_t gx) const { return col0 + 2 * gx; }
};

struct CostVolume {
  Var data;  // F x N x rows x cols, per-channel variance across views
  SparseGrid grid;
  // Per (hypothesis, cell): number of source views that contributed.
  std::vector<std::uint8_t> source_count;
  // Per cell: no hypothesis had a usable source view.
  Mask flagged;
};

struct CostVolumeOptions {
  // Cost written where no source view is usable for a (cell, plane).
  double invalid_cost = 1.0;
};

/// Plane-sweep volume on the sparse grid. Features are quarter-resolution
/// maps; cameras must carry intrinsics scaled to that resolution.
inline CostVolume build_sparse_cost_volume(Var ref_feats, const std::vector<Var>& src_feats,
                                           const CameraView& ref_cam,
                                           const std::vector<CameraView>& src_cams,
                                           const DepthHypotheses& hyps,
                                           const CostVolumeOptions& opt = {}) {
  const Tensor& ref = ref_feats.value();
  require_rank(ref, 3, "cost volume reference features");
  require(!src_feats.empty(), ErrorKind::Config, "cost volume needs at least one source view");
  require(src_feats.size() == src_cams.size(), ErrorKind::Config,
          "source feature / camera count mismatch");
  for (const Var& s : src_feats)
    require(s.value().same_shape(ref), ErrorKind::Dimension,
            "source features must match the reference feature shape");
  require(hyps.size() >= 2, ErrorKind::Config, "need at least two depth hypotheses");

  const std::size_t f = ref.dim(0), h = ref.dim(1), w = ref.dim(2);
  const std::size_t n_hyp = hyps.size(), n_src = src_feats.size();
  SparseGrid grid{h, w, 0, 0};
  const std::size_t rows = grid.rows(), cols = grid.cols(), cells = grid.cells();

  std::vector<ViewTransfer> transfers;
  for (const auto& s : src_cams) transfers.emplace_back(ref_cam, s);

  // Valid sample positions, laid out [hyp][cell][src].
  struct Sample {
    bool valid = false;
    double x = 0.0;
    double y = 0.0;
  };
  std::vector<Sample> samples(n_hyp * cells * n_src);
  const double xmax = static_cast<double>(w - 1), ymax = static_cast<double>(h - 1);
  for (std::size_t j = 0; j < n_hyp; ++j)
    for (std::size_t c = 0; c < cells; ++c) {
      const Vec2 p(static_cast<double>(grid.pixel_col(c % cols)),
                   static_cast<double>(grid.pixel_row(c / cols)));
      for (std::size_t s = 0; s < n_src; ++s) {
        const Reprojection rp = transfers[s].apply(p, hyps.values[j]);
        Sample& smp = samples[(j * cells + c) * n_src + s];
        smp.valid = rp.in_front && rp.pixel.x() >= 0.0 && rp.pixel.x() <= xmax &&
                    rp.pixel.y() >= 0.0 && rp.pixel.y() <= ymax;
        smp.x = rp.pixel.x();
        smp.y = rp.pixel.y();
      }
    }

  CostVolume cv;
  cv.grid = grid;
  cv.source_count.assign(n_hyp * cells, 0);
  cv.flagged.assign(cells, 1);
  Tensor out({f, n_hyp, rows, cols});
  std::vector<double> vals(n_src + 1);
  for (std::size_t j = 0; j < n_hyp; ++j)
    for (std::size_t c = 0; c < cells; ++c) {
      const std::size_t ref_idx = grid.pixel_row(c / cols) * w + grid.pixel_col(c % cols);
      const Sample* smp = &samples[(j * cells + c) * n_src];
      std::size_t used = 0;
      for (std::size_t s = 0; s < n_src; ++s) used += smp[s].valid ? 1 : 0;
      cv.source_count[j * cells + c] = static_cast<std::uint8_t>(std::min<std::size_t>(used, 255));
      if (used > 0) cv.flagged[c] = 0;
      for (std::size_t ch = 0; ch < f; ++ch) {
        double& o = out[((ch * n_hyp + j) * cells) + c];
        if (used == 0) {
          o = opt.invalid_cost;
          continue;
        }
        std::size_t n = 0;
        vals[n++] = ref[ch * h * w + ref_idx];
        for (std::size_t s = 0; s < n_src; ++s) {
          if (!smp[s].valid) continue;
          const BilinearTap tap(smp[s].x, smp[s].y, h, w);
          vals[n++] = tap.value(src_feats[s].value().data() + ch * h * w);
        }
        double m = 0.0;
        for (std::size_t k = 0; k < n; ++k) m += vals[k];
        m /= static_cast<double>(n);
        double v = 0.0;
        for (std::size_t k = 0; k < n; ++k) v += (vals[k] - m) * (vals[k] - m);
        o = v / static_cast<double>(n);
      }
    }

  std::vector<Var> inputs{ref_feats};
  inputs.insert(inputs.end(), src_feats.begin(), src_feats.end());
  cv.data = ref_feats.tape->record(
      std::move(out), inputs,
      [samples = std::move(samples), f, h, w, n_hyp, n_src, cells, cols, grid](BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        std::vector<const Tensor*> maps(n_src + 1);
        std::vector<Tensor*> grads(n_src + 1, nullptr);
        for (std::size_t k = 0; k <= n_src; ++k) {
          maps[k] = &ctx.input(k);
          if (ctx.needs_grad(k)) grads[k] = &ctx.grad_input(k);
        }
        std::vector<double> vals(n_src + 1);
        std::vector<BilinearTap> taps;
        std::vector<std::size_t> who;
        for (std::size_t j = 0; j < n_hyp; ++j)
          for (std::size_t c = 0; c < cells; ++c) {
            const Sample* smp = &samples[(j * cells + c) * n_src];
            taps.clear();
            who.clear();
            for (std::size_t s = 0; s < n_src; ++s)
              if (smp[s].valid) {
                taps.emplace_back(smp[s].x, smp[s].y, h, w);
                who.push_back(s);
              }
            if (taps.empty()) continue;
            const std::size_t ref_idx = grid.pixel_row(c / cols) * w + grid.pixel_col(c % cols);
            const double n = static_cast<double>(taps.size() + 1);
            for (std::size_t ch = 0; ch < f; ++ch) {
              const double gv = g[((ch * n_hyp + j) * cells) + c];
              if (gv == 0.0) continue;
              const std::size_t plane = ch * h * w;
              vals[0] = (*maps[0])[plane + ref_idx];
              for (std::size_t t = 0; t < taps.size(); ++t)
                vals[t + 1] = taps[t].value(maps[who[t] + 1]->data() + plane);
              double m = 0.0;
              for (std::size_t k = 0; k <= taps.size(); ++k) m += vals[k];
              m /= n;
              if (grads[0]) (*grads[0])[plane + ref_idx] += gv * 2.0 * (vals[0] - m) / n;
              for (std::size_t t = 0; t < taps.size(); ++t) {
                Tensor* gs = grads[who[t] + 1];
                if (!gs) continue;
                const double d = gv * 2.0 * (vals[t + 1] - m) / n;
                double* gp = gs->data() + plane;
                for (int q = 0; q < 4; ++q) gp[taps[t].idx[q]] += taps[t].weight[q] * d;
              }
            }
          }
      });
  return cv;
}

/// Flat stride-1 3-D CNN collapsing the feature axis to a single logit per
/// (plane, cell), followed by a softmax over planes.
class CostRegularizer {
 public:
  CostRegularizer() = default;

  CostRegularizer(std::size_t in_channels, std::vector<std::size_t> hidden, ParameterStore& store,
                  std::mt19937_64& rng) {
    hidden.push_back(1);
    std::size_t cin = in_channels;
    for (std::size_t i = 0; i < hidden.size(); ++i) {
      const std::size_t cout = hidden[i];
      Tensor w = glorot_uniform({cout, cin, 3, 3, 3}, cin * 27, cout * 27, rng);
      weight_.push_back(store.add("reg.conv" + std::to_string(i) + ".weight", std::move(w)));
      bias_.push_back(store.add("reg.conv" + std::to_string(i) + ".bias", Tensor({cout})));
      cin = cout;
    }
  }

  std::size_t layer_count() const { return weight_.size(); }
  std::size_t weight_index(std::size_t i) const { return weight_.at(i); }
  std::size_t bias_index(std::size_t i) const { return bias_.at(i); }

  /// Returns the N x rows x cols probability volume.
  Var regularize(Tape& tape, ParameterStore& store, Var volume) const {
    const Tensor& v = volume.value();
    require_rank(v, 4, "regularize");
    for (double x : v.values())
      require(std::isfinite(x), ErrorKind::InvalidArgument, "regularize: non-finite cost");
    Var x = normalize_channels(volume);
    for (std::size_t i = 0; i < weight_.size(); ++i) {
      x = conv3d(x, tape.parameter(store[weight_[i]]), tape.parameter(store[bias_[i]]), 1, 1);
      if (i + 1 < weight_.size()) x = relu(x);
    }
    return softmax_channel(reshape(x, {v.dim(1), v.dim(2), v.dim(3)}));
  }

 private:
  std::vector<std::size_t> weight_;
  std::vector<std::size_t> bias_;
};

struct SparseDepthMap {
  Var values;         // quarter-res, mm; zero off the grid
  Mask mask;          // true exactly on the grid
  Tensor confidence;  // quarter-res, in [0, 1]; zero off the grid
  SparseGrid grid;

  std::size_t height() const { return grid.height; }
  std::size_t width() const { return grid.width; }
};

/// Probability mass of the (up to) four hypotheses nearest to `depth`.
inline double nearest_four_mass(const double* prob, std::size_t stride, const DepthHypotheses& hyps,
                                double depth) {
  const std::size_t n = hyps.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(hyps.values[a] - depth) < std::abs(hyps.values[b] - depth);
  });
  double mass = 0.0;
  for (std::size_t k = 0; k < std::min<std::size_t>(4, n); ++k) mass += prob[order[k] * stride];
  return std::min(mass, 1.0);
}

/// Expected depth per cell (differentiable argmax), scattered onto the
/// quarter-resolution grid.
inline SparseDepthMap soft_argmax_depth(Var prob, const DepthHypotheses& hyps, const SparseGrid& grid) {
  const Tensor& p = prob.value();
  require_rank(p, 3, "soft_argmax_depth");
  require(p.dim(0) == hyps.size(), ErrorKind::Dimension, "probability planes vs hypotheses");
  require(p.dim(1) == grid.rows() && p.dim(2) == grid.cols(), ErrorKind::Dimension,
          "probability volume does not match the sparse grid");
  const std::size_t n = hyps.size(), cols = grid.cols(), cells = grid.cells();
  const std::size_t h = grid.height, w = grid.width;

  SparseDepthMap out;
  out.grid = grid;
  out.mask.assign(h * w, 0);
  out.confidence = Tensor({h, w});
  Tensor values({h, w});
  std::vector<std::size_t> pixel_of(cells);
  for (std::size_t c = 0; c < cells; ++c) {
    const std::size_t idx = grid.pixel_row(c / cols) * w + grid.pixel_col(c % cols);
    pixel_of[c] = idx;
    double d = 0.0;
    for (std::size_t j = 0; j < n; ++j) d += p[j * cells + c] * hyps.values[j];
    values[idx] = d;
    out.mask[idx] = 1;
    out.confidence[idx] = nearest_four_mass(p.data() + c, cells, hyps, d);
  }
  out.values = prob.tape->record(std::move(values), {prob},
                                 [pixel_of, hyps, cells, n](BackwardContext& ctx) {
                                   const Tensor& g = ctx.grad_output();
                                   Tensor& gp = ctx.grad_input(0);
                                   for (std::size_t c = 0; c < cells; ++c) {
                                     const double gv = g[pixel_of[c]];
                                     for (std::size_t j = 0; j < n; ++j)
                                       gp[j * cells + c] += gv * hyps.values[j];
                                   }
                                 });
  return out;
}

}  // namespace fastmvs
