#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fastmvs/error.hpp"
#include "fastmvs/tensor.hpp"

namespace fastmvs {

/// Trainable tensor plus its RMSProp state.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor accumulator;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), accumulator(value.shape()) {}

  void zero_grad() { grad.fill(0.0); }
};

/// Ordered, name-addressable collection of parameters. Layers refer to
/// entries by index so the store can be copied with its owner.
class ParameterStore {
 public:
  std::size_t add(std::string name, Tensor init) {
    require(!find(name).has_value(), ErrorKind::Config, "duplicate parameter name " + name);
    params_.emplace_back(std::move(name), std::move(init));
    return params_.size() - 1;
  }

  Parameter& operator[](std::size_t i) { return params_.at(i); }
  const Parameter& operator[](std::size_t i) const { return params_.at(i); }

  std::optional<std::size_t> find(const std::string& name) const {
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i].name == name) return i;
    return std::nullopt;
  }

  std::size_t size() const noexcept { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

 private:
  std::vector<Parameter> params_;
};

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Tensor& grad() const;
  bool requires_grad() const;
  const Shape& shape() const { return value().shape(); }
};

class BackwardContext;
using BackwardFn = std::function<void(BackwardContext&)>;

/// Explicit, single-use record of one forward pass. Ops only record a backward
/// rule when at least one input requires a gradient, so inference runs on a
/// tape as well without building a graph.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), {}, {}, false, nullptr); }
  Var variable(Tensor value) { return push(std::move(value), {}, {}, true, nullptr); }
  /// Parameters enter as constants while gradients are disabled.
  Var parameter(Parameter& p) {
    if (!grad_enabled_) return constant(p.value);
    return push(p.value, {}, {}, true, &p);
  }

  void set_grad_enabled(bool on) noexcept { grad_enabled_ = on; }
  bool grad_enabled() const noexcept { return grad_enabled_; }

  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
    bool needs = false;
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const Var& v : inputs) {
      require(v.tape == this, ErrorKind::InvalidArgument, "variable recorded on a different tape");
      ids.push_back(v.id);
      needs = needs || nodes_[v.id].requires_grad;
    }
    if (!needs) return push(std::move(value), {}, {}, false, nullptr);
    return push(std::move(value), std::move(ids), std::move(fn), true, nullptr);
  }

  /// Reverse sweep from a scalar output. Every node is visited at most once;
  /// parameter leaves add their gradient into Parameter::grad.
  void backward(Var output);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  const Tensor& grad(std::size_t id) const {
    static const Tensor kEmpty;
    const Node& n = nodes_.at(id);
    return n.grad.empty() ? kEmpty : n.grad;
  }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

 private:
  friend class BackwardContext;

  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    Parameter* parameter = nullptr;
  };

  Var push(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn, bool requires_grad,
           Parameter* param) {
    require(!consumed_, ErrorKind::InvalidArgument, "tape already consumed by backward()");
    Node n;
    n.value = std::move(value);
    n.inputs = std::move(inputs);
    n.backward = std::move(fn);
    n.requires_grad = requires_grad;
    n.parameter = param;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  Tensor& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  std::deque<Node> nodes_;  // push_back keeps value() references valid
  bool consumed_ = false;
  bool grad_enabled_ = true;
};

class BackwardContext {
 public:
  BackwardContext(Tape& tape, std::size_t node) : tape_(tape), node_(node) {}

  const Tensor& grad_output() const { return tape_.nodes_[node_].grad; }
  const Tensor& output() const { return tape_.nodes_[node_].value; }
  std::size_t input_count() const { return tape_.nodes_[node_].inputs.size(); }
  const Tensor& input(std::size_t k) const { return tape_.nodes_[input_id(k)].value; }
  bool needs_grad(std::size_t k) const { return tape_.nodes_[input_id(k)].requires_grad; }
  /// Accumulation buffer for input k (zero-initialised on first use).
  Tensor& grad_input(std::size_t k) { return tape_.grad_buffer(input_id(k)); }

 private:
  std::size_t input_id(std::size_t k) const { return tape_.nodes_[node_].inputs.at(k); }

  Tape& tape_;
  std::size_t node_;
};

inline void Tape::backward(Var output) {
  require(output.tape == this, ErrorKind::InvalidArgument, "backward: foreign variable");
  require(!consumed_, ErrorKind::InvalidArgument, "backward: tape already consumed");
  require(nodes_[output.id].value.numel() == 1, ErrorKind::Dimension,
          "backward: output must be a scalar");
  consumed_ = true;
  if (!nodes_[output.id].requires_grad) return;
  grad_buffer(output.id).fill(1.0);
  for (std::size_t i = output.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty() || !n.requires_grad) continue;
    if (n.backward) {
      BackwardContext ctx(*this, i);
      n.backward(ctx);
    }
    if (n.parameter != nullptr) {
      Tensor& pg = n.parameter->grad;
      if (pg.empty()) pg = Tensor(n.value.shape());
      for (std::size_t k = 0; k < pg.numel(); ++k) pg[k] += n.grad[k];
    }
  }
}

inline const Tensor& Var::value() const { return tape->value(id); }
inline const Tensor& Var::grad() const { return tape->grad(id); }
inline bool Var::requires_grad() const { return tape->requires_grad(id); }

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

inline Var add(Var a, Var b) {
  require(a.value().same_shape(b.value()), ErrorKind::Dimension, "add: shape mismatch");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  return a.tape->record(std::move(out), {a, b}, [](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    for (std::size_t k = 0; k < 2; ++k) {
      if (!ctx.needs_grad(k)) continue;
      Tensor& gi = ctx.grad_input(k);
      for (std::size_t i = 0; i < g.numel(); ++i) gi[i] += g[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  require(a.value().same_shape(b.value()), ErrorKind::Dimension, "sub: shape mismatch");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  return a.tape->record(std::move(out), {a, b}, [](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    if (ctx.needs_grad(0)) {
      Tensor& gi = ctx.grad_input(0);
      for (std::size_t i = 0; i < g.numel(); ++i) gi[i] += g[i];
    }
    if (ctx.needs_grad(1)) {
      Tensor& gi = ctx.grad_input(1);
      for (std::size_t i = 0; i < g.numel(); ++i) gi[i] -= g[i];
    }
  });
}

inline Var mul(Var a, Var b) {
  require(a.value().same_shape(b.value()), ErrorKind::Dimension, "mul: shape mismatch");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  return a.tape->record(std::move(out), {a, b}, [](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    if (ctx.needs_grad(0)) {
      Tensor& gi = ctx.grad_input(0);
      const Tensor& other = ctx.input(1);
      for (std::size_t i = 0; i < g.numel(); ++i) gi[i] += g[i] * other[i];
    }
    if (ctx.needs_grad(1)) {
      Tensor& gi = ctx.grad_input(1);
      const Tensor& other = ctx.input(0);
      for (std::size_t i = 0; i < g.numel(); ++i) gi[i] += g[i] * other[i];
    }
  });
}

inline Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (double& v : out.storage()) v *= factor;
  return a.tape->record(std::move(out), {a}, [factor](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    Tensor& gi = ctx.grad_input(0);
    for (std::size_t i = 0; i < g.numel(); ++i) gi[i] += factor * g[i];
  });
}

inline Var relu(Var a) {
  Tensor out = a.value();
  for (double& v : out.storage()) v = v > 0.0 ? v : 0.0;
  return a.tape->record(std::move(out), {a}, [](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    const Tensor& x = ctx.input(0);
    Tensor& gi = ctx.grad_input(0);
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (x[i] > 0.0) gi[i] += g[i];
  });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape->record(Tensor::scalar(s), {a}, [](BackwardContext& ctx) {
    const double g = ctx.grad_output()[0];
    Tensor& gi = ctx.grad_input(0);
    for (double& v : gi.storage()) v += g;
  });
}

inline Var mean(Var a) {
  require(a.value().numel() > 0, ErrorKind::Dimension, "mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().numel()));
}

inline Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape->record(std::move(out), {a}, [](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    Tensor& gi = ctx.grad_input(0);
    for (std::size_t i = 0; i < g.numel(); ++i) gi[i] += g[i];
  });
}

/// Cuts the graph: same value, no gradient flows back.
inline Var detach(Var a) { return a.tape->constant(a.value()); }

// ---------------------------------------------------------------------------
// Convolutions (cross-correlation, zero padding)
// ---------------------------------------------------------------------------

inline std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride,
                                 std::size_t pad) {
  require(in + 2 * pad >= k, ErrorKind::Dimension, "kernel larger than padded input");
  return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

// Output index range [lo, hi) such that o*stride - pad + tap lies in [0, in).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t in,
                                                       std::size_t stride, std::size_t pad,
                                                       std::size_t tap) {
  const long long s = static_cast<long long>(stride);
  const long long off = static_cast<long long>(tap) - static_cast<long long>(pad);
  const long long last = static_cast<long long>(in) - 1 - off;
  long long lo = off >= 0 ? 0 : (-off + s - 1) / s;
  long long hi = last < 0 ? 0 : std::min<long long>(last / s + 1, static_cast<long long>(out));
  if (lo > hi) lo = hi;
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

}  // namespace detail

/// 2-D convolution: input C x H x W, weights O x C x K x K, bias O.
inline Var conv2d(Var input, Var weights, Var bias, std::size_t stride, std::size_t pad) {
  const Tensor& x = input.value();
  const Tensor& w = weights.value();
  const Tensor& b = bias.value();
  require_rank(x, 3, "conv2d input");
  require_rank(w, 4, "conv2d weights");
  require(stride >= 1, ErrorKind::Config, "conv2d: stride must be >= 1");
  require(w.dim(1) == x.dim(0), ErrorKind::Dimension,
          "conv2d: weight channels " + std::to_string(w.dim(1)) + " vs input channels " +
              std::to_string(x.dim(0)));
  require(w.dim(2) == w.dim(3), ErrorKind::Dimension, "conv2d: square kernels only");
  require_shape(b, {w.dim(0)}, "conv2d bias");
  const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  const std::size_t oh = conv_out_size(h, k, stride, pad), ow = conv_out_size(wd, k, stride, pad);

  Tensor out({cout, oh, ow});
  for (std::size_t o = 0; o < cout; ++o) {
    double* op = out.data() + o * oh * ow;
    std::fill(op, op + oh * ow, b[o]);
    for (std::size_t c = 0; c < cin; ++c) {
      const double* ip = x.data() + c * h * wd;
      for (std::size_t ky = 0; ky < k; ++ky) {
        const auto [y0, y1] = detail::valid_range(oh, h, stride, pad, ky);
        for (std::size_t kx = 0; kx < k; ++kx) {
          const double wv = w(o, c, ky, kx);
          const auto [x0, x1] = detail::valid_range(ow, wd, stride, pad, kx);
          for (std::size_t oy = y0; oy < y1; ++oy) {
            const double* row = ip + (oy * stride + ky - pad) * wd;
            double* orow = op + oy * ow;
            for (std::size_t ox = x0; ox < x1; ++ox) orow[ox] += wv * row[ox * stride + kx - pad];
          }
        }
      }
    }
  }

  return input.tape->record(
      std::move(out), {input, weights, bias},
      [stride, pad, cin, h, wd, cout, k, oh, ow](BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        const Tensor& x = ctx.input(0);
        const Tensor& w = ctx.input(1);
        const bool gx_needed = ctx.needs_grad(0), gw_needed = ctx.needs_grad(1);
        Tensor* gx = gx_needed ? &ctx.grad_input(0) : nullptr;
        Tensor* gw = gw_needed ? &ctx.grad_input(1) : nullptr;
        if (ctx.needs_grad(2)) {
          Tensor& gb = ctx.grad_input(2);
          for (std::size_t o = 0; o < cout; ++o) {
            const double* gp = g.data() + o * oh * ow;
            double s = 0.0;
            for (std::size_t i = 0; i < oh * ow; ++i) s += gp[i];
            gb[o] += s;
          }
        }
        if (!gx_needed && !gw_needed) return;
        for (std::size_t o = 0; o < cout; ++o) {
          const double* gp = g.data() + o * oh * ow;
          for (std::size_t c = 0; c < cin; ++c) {
            const double* ip = x.data() + c * h * wd;
            double* gip = gx ? gx->data() + c * h * wd : nullptr;
            for (std::size_t ky = 0; ky < k; ++ky) {
              const auto [y0, y1] = detail::valid_range(oh, h, stride, pad, ky);
              for (std::size_t kx = 0; kx < k; ++kx) {
                const auto [x0, x1] = detail::valid_range(ow, wd, stride, pad, kx);
                const double wv = w(o, c, ky, kx);
                double acc = 0.0;
                for (std::size_t oy = y0; oy < y1; ++oy) {
                  const std::size_t iy = oy * stride + ky - pad;
                  const double* grow = gp + oy * ow;
                  const double* irow = ip + iy * wd;
                  if (gip) {
                    double* girow = gip + iy * wd;
                    for (std::size_t ox = x0; ox < x1; ++ox) {
                      girow[ox * stride + kx - pad] += wv * grow[ox];
                      acc += grow[ox] * irow[ox * stride + kx - pad];
                    }
                  } else {
                    for (std::size_t ox = x0; ox < x1; ++ox)
                      acc += grow[ox] * irow[ox * stride + kx - pad];
                  }
                }
                if (gw) (*gw)(o, c, ky, kx) += acc;
              }
            }
          }
        }
      });
}

/// 3-D convolution: input C x D x H x W, weights O x C x K x K x K, bias O.
inline Var conv3d(Var input, Var weights, Var bias, std::size_t stride, std::size_t pad) {
  const Tensor& x = input.value();
  const Tensor& w = weights.value();
  const Tensor& b = bias.value();
  require_rank(x, 4, "conv3d input");
  require_rank(w, 5, "conv3d weights");
  require(stride >= 1, ErrorKind::Config, "conv3d: stride must be >= 1");
  require(w.dim(1) == x.dim(0), ErrorKind::Dimension, "conv3d: channel mismatch");
  require(w.dim(2) == w.dim(3) && w.dim(3) == w.dim(4), ErrorKind::Dimension,
          "conv3d: cubic kernels only");
  require_shape(b, {w.dim(0)}, "conv3d bias");
  const std::size_t cin = x.dim(0), d = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  const std::size_t od = conv_out_size(d, k, stride, pad), oh = conv_out_size(h, k, stride, pad),
                    ow = conv_out_size(wd, k, stride, pad);
  const std::size_t in_plane = h * wd, out_plane = oh * ow;

  Tensor out({cout, od, oh, ow});
  for (std::size_t o = 0; o < cout; ++o) {
    double* op = out.data() + o * od * out_plane;
    std::fill(op, op + od * out_plane, b[o]);
    for (std::size_t c = 0; c < cin; ++c) {
      const double* ip = x.data() + c * d * in_plane;
      for (std::size_t kz = 0; kz < k; ++kz) {
        const auto [z0, z1] = detail::valid_range(od, d, stride, pad, kz);
        for (std::size_t ky = 0; ky < k; ++ky) {
          const auto [y0, y1] = detail::valid_range(oh, h, stride, pad, ky);
          for (std::size_t kx = 0; kx < k; ++kx) {
            const auto [x0, x1] = detail::valid_range(ow, wd, stride, pad, kx);
            const double wv = w(o, c, kz, ky, kx);
            for (std::size_t oz = z0; oz < z1; ++oz) {
              const double* iplane = ip + (oz * stride + kz - pad) * in_plane;
              double* oplane = op + oz * out_plane;
              for (std::size_t oy = y0; oy < y1; ++oy) {
                const double* row = iplane + (oy * stride + ky - pad) * wd;
                double* orow = oplane + oy * ow;
                for (std::size_t ox = x0; ox < x1; ++ox)
                  orow[ox] += wv * row[ox * stride + kx - pad];
              }
            }
          }
        }
      }
    }
  }

  return input.tape->record(
      std::move(out), {input, weights, bias},
      [=](BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        const Tensor& x = ctx.input(0);
        const Tensor& w = ctx.input(1);
        Tensor* gx = ctx.needs_grad(0) ? &ctx.grad_input(0) : nullptr;
        Tensor* gw = ctx.needs_grad(1) ? &ctx.grad_input(1) : nullptr;
        if (ctx.needs_grad(2)) {
          Tensor& gb = ctx.grad_input(2);
          for (std::size_t o = 0; o < cout; ++o) {
            const double* gp = g.data() + o * od * out_plane;
            double s = 0.0;
            for (std::size_t i = 0; i < od * out_plane; ++i) s += gp[i];
            gb[o] += s;
          }
        }
        if (!gx && !gw) return;
        for (std::size_t o = 0; o < cout; ++o) {
          const double* gp = g.data() + o * od * out_plane;
          for (std::size_t c = 0; c < cin; ++c) {
            const double* ip = x.data() + c * d * in_plane;
            double* gip = gx ? gx->data() + c * d * in_plane : nullptr;
            for (std::size_t kz = 0; kz < k; ++kz) {
              const auto [z0, z1] = detail::valid_range(od, d, stride, pad, kz);
              for (std::size_t ky = 0; ky < k; ++ky) {
                const auto [y0, y1] = detail::valid_range(oh, h, stride, pad, ky);
                for (std::size_t kx = 0; kx < k; ++kx) {
                  const auto [x0, x1] = detail::valid_range(ow, wd, stride, pad, kx);
                  const double wv = w(o, c, kz, ky, kx);
                  double acc = 0.0;
                  for (std::size_t oz = z0; oz < z1; ++oz) {
                    const std::size_t iz = oz * stride + kz - pad;
                    for (std::size_t oy = y0; oy < y1; ++oy) {
                      const std::size_t iy = oy * stride + ky - pad;
                      const double* grow = gp + oz * out_plane + oy * ow;
                      const double* irow = ip + iz * in_plane + iy * wd;
                      double* girow = gip ? gip + iz * in_plane + iy * wd : nullptr;
                      for (std::size_t ox = x0; ox < x1; ++ox) {
                        const std::size_t ix = ox * stride + kx - pad;
                        acc += grow[ox] * irow[ix];
                        if (girow) girow[ix] += wv * grow[ox];
                      }
                    }
                  }
                  if (gw) (*gw)(o, c, kz, ky, kx) += acc;
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Normalisation, resampling, sampling
// ---------------------------------------------------------------------------

/// Softmax over axis 0 of a C x (...) tensor, independently per trailing index.
inline Var softmax_channel(Var a) {
  const Tensor& x = a.value();
  require(x.rank() >= 1 && x.dim(0) >= 1, ErrorKind::Dimension,
          "softmax_channel needs at least one channel");
  const std::size_t c = x.dim(0), n = x.numel() / c;
  Tensor out(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < c; ++k) m = std::max(m, x[k * n + i]);
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      const double e = std::exp(x[k * n + i] - m);
      out[k * n + i] = e;
      s += e;
    }
    for (std::size_t k = 0; k < c; ++k) out[k * n + i] /= s;
  }
  return a.tape->record(std::move(out), {a}, [c, n](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    const Tensor& y = ctx.output();
    Tensor& gi = ctx.grad_input(0);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t k = 0; k < c; ++k) dot += g[k * n + i] * y[k * n + i];
      for (std::size_t k = 0; k < c; ++k) gi[k * n + i] += y[k * n + i] * (g[k * n + i] - dot);
    }
  });
}

/// Per-channel standardisation over all trailing axes: (x - mean) / sqrt(var + eps).
/// No learnable scale or shift.
inline Var normalize_channels(Var a, double eps = 1e-5) {
  const Tensor& x = a.value();
  require(x.rank() >= 2 && x.numel() > 0, ErrorKind::Dimension, "normalize_channels needs rank >= 2");
  const std::size_t c = x.dim(0), n = x.numel() / c;
  Tensor out(x.shape());
  std::vector<double> inv_std(c);
  for (std::size_t k = 0; k < c; ++k) {
    const double* p = x.data() + k * n;
    double mean = 0.0, var = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += p[i];
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) var += (p[i] - mean) * (p[i] - mean);
    var /= static_cast<double>(n);
    inv_std[k] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) out[k * n + i] = (p[i] - mean) * inv_std[k];
  }
  return a.tape->record(std::move(out), {a}, [c, n, inv_std](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    const Tensor& y = ctx.output();
    Tensor& gi = ctx.grad_input(0);
    for (std::size_t k = 0; k < c; ++k) {
      double mg = 0.0, mgy = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        mg += g[k * n + i];
        mgy += g[k * n + i] * y[k * n + i];
      }
      mg /= static_cast<double>(n);
      mgy /= static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i)
        gi[k * n + i] += inv_std[k] * (g[k * n + i] - mg - y[k * n + i] * mgy);
    }
  });
}

/// Replicates every pixel of the trailing two axes into a 2x2 block.
inline Var nearest_upsample2x(Var a) {
  const Tensor& x = a.value();
  require(x.rank() >= 2, ErrorKind::Dimension, "nearest_upsample2x needs rank >= 2");
  const std::size_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  const std::size_t planes = x.numel() / (h * w);
  Shape shape = x.shape();
  shape[shape.size() - 2] = 2 * h;
  shape[shape.size() - 1] = 2 * w;
  Tensor out(shape);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx)
        out[(p * 2 * h + y) * 2 * w + xx] = x[(p * h + y / 2) * w + xx / 2];
  return a.tape->record(std::move(out), {a}, [planes, h, w](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    Tensor& gi = ctx.grad_input(0);
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t y = 0; y < 2 * h; ++y)
        for (std::size_t xx = 0; xx < 2 * w; ++xx)
          gi[(p * h + y / 2) * w + xx / 2] += g[(p * 2 * h + y) * 2 * w + xx];
  });
}

/// Concatenates C1 x H x W and C2 x H x W along channels.
inline Var concat_channels(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require_rank(x, 3, "concat_channels");
  require_rank(y, 3, "concat_channels");
  require(x.dim(1) == y.dim(1) && x.dim(2) == y.dim(2), ErrorKind::Dimension,
          "concat_channels: spatial size mismatch");
  Tensor out({x.dim(0) + y.dim(0), x.dim(1), x.dim(2)});
  std::copy(x.storage().begin(), x.storage().end(), out.storage().begin());
  std::copy(y.storage().begin(), y.storage().end(), out.storage().begin() + x.numel());
  const std::size_t split = x.numel();
  return a.tape->record(std::move(out), {a, b}, [split](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    if (ctx.needs_grad(0)) {
      Tensor& gi = ctx.grad_input(0);
      for (std::size_t i = 0; i < split; ++i) gi[i] += g[i];
    }
    if (ctx.needs_grad(1)) {
      Tensor& gi = ctx.grad_input(1);
      for (std::size_t i = 0; i < gi.numel(); ++i) gi[i] += g[split + i];
    }
  });
}

/// Bilinear interpolation weights for a continuous coordinate on an axis of
/// length n with clamp-to-edge. `slope` is d(fraction)/d(coord): zero when the
/// coordinate was clamped.
struct AxisTap {
  std::size_t i0 = 0;
  std::size_t i1 = 0;
  double frac = 0.0;
  double slope = 1.0;
};

inline AxisTap axis_tap(double coord, std::size_t n) {
  AxisTap t;
  const double hi = static_cast<double>(n - 1);
  double c = coord;
  if (c < 0.0) {
    c = 0.0;
    t.slope = 0.0;
  } else if (c > hi) {
    c = hi;
    t.slope = 0.0;
  }
  if (n == 1) {
    t.slope = 0.0;
    return t;
  }
  std::size_t i0 = static_cast<std::size_t>(std::floor(c));
  if (i0 >= n - 1) i0 = n - 2;
  t.i0 = i0;
  t.i1 = i0 + 1;
  t.frac = c - static_cast<double>(i0);
  return t;
}

/// One bilinear lookup into a C x H x W map: value and coordinate gradient per
/// channel. The four corner weights are exposed for backward passes.
struct BilinearTap {
  AxisTap tx;
  AxisTap ty;
  std::size_t idx[4] = {0, 0, 0, 0};  // (y0,x0) (y0,x1) (y1,x0) (y1,x1)
  double weight[4] = {0, 0, 0, 0};

  BilinearTap(double x, double y, std::size_t h, std::size_t w) : tx(axis_tap(x, w)), ty(axis_tap(y, h)) {
    idx[0] = ty.i0 * w + tx.i0;
    idx[1] = ty.i0 * w + tx.i1;
    idx[2] = ty.i1 * w + tx.i0;
    idx[3] = ty.i1 * w + tx.i1;
    weight[0] = (1 - ty.frac) * (1 - tx.frac);
    weight[1] = (1 - ty.frac) * tx.frac;
    weight[2] = ty.frac * (1 - tx.frac);
    weight[3] = ty.frac * tx.frac;
  }

  double value(const double* plane) const {
    return weight[0] * plane[idx[0]] + weight[1] * plane[idx[1]] + weight[2] * plane[idx[2]] +
           weight[3] * plane[idx[3]];
  }
  double dx(const double* plane) const {
    return tx.slope * ((1 - ty.frac) * (plane[idx[1]] - plane[idx[0]]) +
                       ty.frac * (plane[idx[3]] - plane[idx[2]]));
  }
  double dy(const double* plane) const {
    return ty.slope * ((1 - tx.frac) * (plane[idx[2]] - plane[idx[0]]) +
                       tx.frac * (plane[idx[3]] - plane[idx[1]]));
  }
  // Mixed partial d2/dxdy (the pure second derivatives vanish inside a cell).
  double dxy(const double* plane) const {
    return tx.slope * ty.slope *
           (plane[idx[3]] - plane[idx[2]] - plane[idx[1]] + plane[idx[0]]);
  }
};

/// Samples a C x H x W map at M continuous (x, y) pixel coordinates given as
/// an M x 2 tensor. Result is C x M. Differentiable w.r.t. map and coords.
inline Var bilinear_sample(Var map, Var coords) {
  const Tensor& f = map.value();
  const Tensor& p = coords.value();
  require_rank(f, 3, "bilinear_sample map");
  require(p.rank() == 2 && p.dim(1) == 2, ErrorKind::Dimension,
          "bilinear_sample coords must be M x 2");
  const std::size_t c = f.dim(0), h = f.dim(1), w = f.dim(2), m = p.dim(0);
  for (double v : p.values())
    require(std::isfinite(v), ErrorKind::InvalidArgument, "bilinear_sample: non-finite coordinate");
  Tensor out({c, m});
  for (std::size_t j = 0; j < m; ++j) {
    const BilinearTap tap(p(j, 0), p(j, 1), h, w);
    for (std::size_t ch = 0; ch < c; ++ch) out(ch, j) = tap.value(f.data() + ch * h * w);
  }
  return map.tape->record(std::move(out), {map, coords}, [c, h, w, m](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    const Tensor& f = ctx.input(0);
    const Tensor& p = ctx.input(1);
    Tensor* gf = ctx.needs_grad(0) ? &ctx.grad_input(0) : nullptr;
    Tensor* gp = ctx.needs_grad(1) ? &ctx.grad_input(1) : nullptr;
    for (std::size_t j = 0; j < m; ++j) {
      const BilinearTap tap(p(j, 0), p(j, 1), h, w);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double gv = g(ch, j);
        if (gf) {
          double* plane = gf->data() + ch * h * w;
          for (int k = 0; k < 4; ++k) plane[tap.idx[k]] += tap.weight[k] * gv;
        }
        if (gp) {
          const double* plane = f.data() + ch * h * w;
          (*gp)(j, 0) += gv * tap.dx(plane);
          (*gp)(j, 1) += gv * tap.dy(plane);
        }
      }
    }
  });
}

/// Bilinear resize of C x h x w to C x out_h x out_w. Output pixel i samples
/// input coordinate i * (h / out_h), i.e. integer pixel centres line up with
/// the stride of the network that produced the coarse map.
inline Var bilinear_resize(Var a, std::size_t out_h, std::size_t out_w) {
  const Tensor& x = a.value();
  require_rank(x, 3, "bilinear_resize");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  Tensor out({c, out_h, out_w});
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t xx = 0; xx < out_w; ++xx) {
      const BilinearTap tap(static_cast<double>(xx) * sx, static_cast<double>(y) * sy, h, w);
      for (std::size_t ch = 0; ch < c; ++ch)
        out(ch, y, xx) = tap.value(x.data() + ch * h * w);
    }
  return a.tape->record(std::move(out), {a}, [=](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    Tensor& gi = ctx.grad_input(0);
    for (std::size_t y = 0; y < out_h; ++y)
      for (std::size_t xx = 0; xx < out_w; ++xx) {
        const BilinearTap tap(static_cast<double>(xx) * sx, static_cast<double>(y) * sy, h, w);
        for (std::size_t ch = 0; ch < c; ++ch) {
          double* plane = gi.data() + ch * h * w;
          const double gv = g(ch, y, xx);
          for (int k = 0; k < 4; ++k) plane[tap.idx[k]] += tap.weight[k] * gv;
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

using Mask = std::vector<std::uint8_t>;

/// Mean |pred - target| over entries where mask != 0. Subgradient 0 at ties.
inline Var l1_loss_masked(Var pred, const Tensor& target, const Mask& mask) {
  const Tensor& x = pred.value();
  require(x.same_shape(target), ErrorKind::Dimension, "l1_loss_masked: shape mismatch");
  require(mask.size() == x.numel(), ErrorKind::Dimension, "l1_loss_masked: mask size mismatch");
  std::size_t count = 0;
  double s = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i)
    if (mask[i]) {
      s += std::abs(x[i] - target[i]);
      ++count;
    }
  require(count > 0, ErrorKind::InvalidArgument, "l1_loss_masked: empty mask");
  const double inv = 1.0 / static_cast<double>(count);
  return pred.tape->record(Tensor::scalar(s * inv), {pred},
                           [target, mask, inv](BackwardContext& ctx) {
                             const double g = ctx.grad_output()[0] * inv;
                             const Tensor& x = ctx.input(0);
                             Tensor& gi = ctx.grad_input(0);
                             for (std::size_t i = 0; i < x.numel(); ++i) {
                               if (!mask[i]) continue;
                               const double d = x[i] - target[i];
                               if (d > 0.0) gi[i] += g;
                               else if (d < 0.0) gi[i] -= g;
                             }
                           });
}

}  // namespace fastmvs
