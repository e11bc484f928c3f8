#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "fastmvs/autodiff.hpp"
#include "fastmvs/cost_volume.hpp"

namespace fastmvs {

enum class PropagationMode { Nearest, Bilateral, Learned };

struct PropagationConfig {
  std::size_t k = 3;
  PropagationMode mode = PropagationMode::Learned;
  double sigma_spatial = 1.0;  // pixels
  double sigma_range = 0.1;    // intensity units

  void validate() const {
    require(k >= 3 && k % 2 == 1, ErrorKind::Config, "propagation window must be odd and >= 3");
    if (mode == PropagationMode::Bilateral)
      require(sigma_spatial > 0.0 && sigma_range > 0.0, ErrorKind::Config,
              "bilateral sigmas must be positive");
  }
};

/// For every pixel of an h x w grid, the flat index of the nearest masked
/// pixel (Euclidean; ties -> smaller row, then smaller column).
inline std::vector<std::size_t> nearest_index_map(const Mask& mask, std::size_t h, std::size_t w) {
  require(mask.size() == h * w, ErrorKind::Dimension, "nearest_index_map: mask size");
  require(std::any_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; }),
          ErrorKind::InvalidArgument, "densify: empty mask");
  std::vector<std::size_t> out(h * w);
  const long long H = static_cast<long long>(h), W = static_cast<long long>(w);
  for (long long y = 0; y < H; ++y)
    for (long long x = 0; x < W; ++x) {
      long long best_d2 = std::numeric_limits<long long>::max();
      long long by = 0, bx = 0;
      // Rings of Chebyshev radius r hold points at distance >= r, so stop once
      // r^2 exceeds the best squared distance.
      for (long long r = 0; r * r <= best_d2 && r <= std::max(H, W); ++r) {
        for (long long yy = y - r; yy <= y + r; ++yy) {
          if (yy < 0 || yy >= H) continue;
          const bool edge_row = (yy == y - r || yy == y + r);
          for (long long xx = x - r; xx <= x + r; xx += (edge_row ? 1 : 2 * r)) {
            if (xx >= 0 && xx < W && mask[yy * W + xx]) {
              const long long d2 = (yy - y) * (yy - y) + (xx - x) * (xx - x);
              if (d2 < best_d2 || (d2 == best_d2 && (yy < by || (yy == by && xx < bx)))) {
                best_d2 = d2;
                by = yy;
                bx = xx;
              }
            }
            if (r == 0) break;
          }
        }
      }
      out[y * W + x] = static_cast<std::size_t>(by * W + bx);
    }
  return out;
}

/// out[i] = in[index[i]], differentiable w.r.t. in.
inline Var gather(Var input, const std::vector<std::size_t>& index, Shape shape) {
  const Tensor& x = input.value();
  require(shape_numel(shape) == index.size(), ErrorKind::Dimension, "gather: shape vs index size");
  Tensor out(std::move(shape));
  for (std::size_t i = 0; i < index.size(); ++i) out[i] = x[index.at(i)];
  return input.tape->record(std::move(out), {input}, [index](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    Tensor& gi = ctx.grad_input(0);
    for (std::size_t i = 0; i < index.size(); ++i) gi[index[i]] += g[i];
  });
}

/// Nearest-neighbour fill of a sparse depth map.
inline Var densify_nearest(const SparseDepthMap& sparse) {
  const std::size_t h = sparse.height(), w = sparse.width();
  return gather(sparse.values, nearest_index_map(sparse.mask, h, w), {h, w});
}

/// Same fill applied to the confidence map (no gradient).
inline Tensor densify_confidence(const SparseDepthMap& sparse) {
  const std::size_t h = sparse.height(), w = sparse.width();
  const auto index = nearest_index_map(sparse.mask, h, w);
  Tensor out({h, w});
  for (std::size_t i = 0; i < index.size(); ++i) out[i] = sparse.confidence[index[i]];
  return out;
}

namespace detail {
inline std::size_t clamp_index(long long v, std::size_t n) {
  return static_cast<std::size_t>(std::clamp<long long>(v, 0, static_cast<long long>(n) - 1));
}
}  // namespace detail

/// Joint bilateral filter over a k x k window with Gaussian spatial and range
/// kernels; the guide is C x h x w at the depth map's resolution. Window taps
/// beyond the border repeat the edge pixel but keep their spatial offset.
inline Tensor joint_bilateral(const Tensor& dense, const Tensor& guide, const PropagationConfig& cfg) {
  require(cfg.mode == PropagationMode::Bilateral, ErrorKind::Config,
          "joint_bilateral requires bilateral mode");
  cfg.validate();
  require_rank(dense, 2, "joint_bilateral depth");
  require_rank(guide, 3, "joint_bilateral guide");
  const std::size_t h = dense.dim(0), w = dense.dim(1), c = guide.dim(0);
  require(guide.dim(1) == h && guide.dim(2) == w, ErrorKind::Dimension,
          "joint_bilateral: guide must match depth resolution");
  const long long r = static_cast<long long>(cfg.k / 2);
  const double inv_s = 1.0 / (2.0 * cfg.sigma_spatial * cfg.sigma_spatial);
  const double inv_r = 1.0 / (2.0 * cfg.sigma_range * cfg.sigma_range);
  Tensor out({h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double num = 0.0, z = 0.0;
      for (long long dy = -r; dy <= r; ++dy)
        for (long long dx = -r; dx <= r; ++dx) {
          const std::size_t qy = detail::clamp_index(static_cast<long long>(y) + dy, h);
          const std::size_t qx = detail::clamp_index(static_cast<long long>(x) + dx, w);
          double diff2 = 0.0;
          for (std::size_t ch = 0; ch < c; ++ch) {
            const double d = guide(ch, y, x) - guide(ch, qy, qx);
            diff2 += d * d;
          }
          const double wgt =
              std::exp(-static_cast<double>(dx * dx + dy * dy) * inv_s) * std::exp(-diff2 * inv_r);
          num += wgt * dense(qy, qx);
          z += wgt;
        }
      out(y, x) = num / z;
    }
  return out;
}

/// Learned propagation: out(p) = sum_q depth(q) * weights(q_index, p) over the
/// k x k window (clamp-to-edge); weights are already softmax-normalised.
inline Var propagate_learned(Var depth, Var weights) {
  const Tensor& d = depth.value();
  const Tensor& wt = weights.value();
  require_rank(d, 2, "propagate_learned depth");
  require_rank(wt, 3, "propagate_learned weights");
  const std::size_t h = d.dim(0), w = d.dim(1), kk = wt.dim(0);
  const std::size_t k = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(kk))));
  require(k * k == kk && k % 2 == 1, ErrorKind::Dimension, "weights must have k*k channels, k odd");
  require(wt.dim(1) == h && wt.dim(2) == w, ErrorKind::Dimension,
          "propagate_learned: weight map must match depth resolution");
  for (std::size_t p = 0; p < h * w; ++p) {
    double s = 0.0;
    for (std::size_t q = 0; q < kk; ++q) s += wt[q * h * w + p];
    require(std::abs(s - 1.0) <= 1e-6, ErrorKind::Contract,
            "propagation weights not normalised at pixel " + std::to_string(p));
  }
  const long long r = static_cast<long long>(k / 2);
  // im2col-style source index table: src[q * h * w + p].
  std::vector<std::size_t> src(kk * h * w);
  for (long long dy = -r; dy <= r; ++dy)
    for (long long dx = -r; dx <= r; ++dx) {
      const std::size_t q = static_cast<std::size_t>((dy + r) * static_cast<long long>(k) + (dx + r));
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          src[q * h * w + y * w + x] =
              detail::clamp_index(static_cast<long long>(y) + dy, h) * w +
              detail::clamp_index(static_cast<long long>(x) + dx, w);
    }
  Tensor out({h, w});
  for (std::size_t q = 0; q < kk; ++q)
    for (std::size_t p = 0; p < h * w; ++p) out[p] += d[src[q * h * w + p]] * wt[q * h * w + p];
  const std::size_t hw = h * w;
  return depth.tape->record(std::move(out), {depth, weights},
                            [src = std::move(src), kk, hw](BackwardContext& ctx) {
                              const Tensor& g = ctx.grad_output();
                              const Tensor& d = ctx.input(0);
                              const Tensor& wt = ctx.input(1);
                              Tensor* gd = ctx.needs_grad(0) ? &ctx.grad_input(0) : nullptr;
                              Tensor* gw = ctx.needs_grad(1) ? &ctx.grad_input(1) : nullptr;
                              for (std::size_t q = 0; q < kk; ++q)
                                for (std::size_t p = 0; p < hw; ++p) {
                                  const std::size_t i = q * hw + p;
                                  if (gd) (*gd)[src[i]] += g[p] * wt[i];
                                  if (gw) (*gw)[i] += g[p] * d[src[i]];
                                }
                            });
}

/// Point subsampling of the trailing two axes: out(y, x) = in(f*y, f*x).
/// Matches the pixel-centre convention of the strided feature maps.
inline Tensor subsample(const Tensor& t, std::size_t factor) {
  require(t.rank() >= 2, ErrorKind::Dimension, "subsample needs rank >= 2");
  const std::size_t h = t.dim(t.rank() - 2), w = t.dim(t.rank() - 1);
  require(factor >= 1 && h % factor == 0 && w % factor == 0, ErrorKind::Dimension,
          "subsample factor must divide the spatial size");
  const std::size_t oh = h / factor, ow = w / factor, planes = t.numel() / (h * w);
  Shape shape = t.shape();
  shape[shape.size() - 2] = oh;
  shape[shape.size() - 1] = ow;
  Tensor out(shape);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x)
        out[(p * oh + y) * ow + x] = t[(p * h + y * factor) * w + x * factor];
  return out;
}

}  // namespace fastmvs
