#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include "fastmvs/autodiff.hpp"
#include "fastmvs/error.hpp"

namespace fastmvs {

struct RmsPropConfig {
  double learning_rate = 0.0005;
  double decay_rate = 0.9;  // rho
  double eps = 1e-8;
};

/// acc <- rho*acc + (1-rho)*g^2 ; theta <- theta - lr*g/(sqrt(acc)+eps);
/// gradients are cleared afterwards.
inline void rmsprop_step(ParameterStore& params, const RmsPropConfig& cfg) {
  for (Parameter& p : params) {
    if (p.grad.empty()) continue;
    if (p.accumulator.empty()) p.accumulator = Tensor(p.value.shape());
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      const double g = p.grad[i];
      double& acc = p.accumulator[i];
      acc = cfg.decay_rate * acc + (1.0 - cfg.decay_rate) * g * g;
      p.value[i] -= cfg.learning_rate * g / (std::sqrt(acc) + cfg.eps);
    }
    p.zero_grad();
  }
}

/// Step schedule: lr0 * factor^floor(epoch / every), epochs counted from 0.
inline double scheduled_learning_rate(double lr0, double factor, int every, int epoch) {
  require(every > 0, ErrorKind::Config, "learning-rate decay period must be positive");
  return lr0 * std::pow(factor, epoch / every);
}

/// Uniform(+-sqrt(6 / (fan_in + fan_out))) initialisation.
inline Tensor glorot_uniform(const Shape& shape, std::size_t fan_in, std::size_t fan_out,
                             std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(shape);
  for (double& v : t.storage()) v = dist(rng);
  return t;
}

// ---------------------------------------------------------------------------
// Checkpoint file: "MVSF", u32 version, u32 count, then per parameter
// u32 name length, name bytes, u32 rank, rank x u32 dims, float64 data.
// All integers and floats little-endian.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
void put_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

class ByteReader {
 public:
  ByteReader(std::string data, std::string source) : data_(std::move(data)), source_(std::move(source)) {}

  template <class T>
  T get() {
    need(sizeof(T));
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, data_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, bytes, sizeof(T));
    return v;
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == data_.size(); }
  std::size_t position() const { return pos_; }
  [[noreturn]] void error(const std::string& what) const {
    throw ParseError(source_, 0, what + " at byte " + std::to_string(pos_));
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) error("truncated file");
  }

  std::string data_;
  std::string source_;
  std::size_t pos_ = 0;
};

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Data, "cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::Data, "cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorKind::Data, "short write to " + path);
}

}  // namespace detail

struct NamedTensor {
  std::string name;
  Tensor value;
};

inline std::string encode_checkpoint(const std::vector<NamedTensor>& entries) {
  std::string out = "MVSF";
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.value.rank()));
    for (std::size_t d : e.value.shape()) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (double v : e.value.values()) detail::put_le<double>(out, v);
  }
  return out;
}

inline std::vector<NamedTensor> decode_checkpoint(std::string bytes, const std::string& source) {
  detail::ByteReader r(std::move(bytes), source);
  if (r.bytes(4) != "MVSF") r.error("bad checkpoint magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) r.error("unsupported checkpoint version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor e;
    e.name = r.bytes(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint32_t>();
    e.value = Tensor(shape);
    for (double& v : e.value.storage()) v = r.get<double>();
    out.push_back(std::move(e));
  }
  if (!r.at_end()) r.error("trailing bytes after checkpoint");
  return out;
}

inline void save_checkpoint(const std::string& path, const ParameterStore& params) {
  std::vector<NamedTensor> entries;
  for (const Parameter& p : params) entries.push_back({p.name, p.value});
  detail::write_file_bytes(path, encode_checkpoint(entries));
}

/// Loads values into an existing store; every stored parameter must exist with
/// the same shape and every store entry must be present.
inline void load_checkpoint(const std::string& path, ParameterStore& params) {
  const auto entries = decode_checkpoint(detail::read_file_bytes(path), path);
  require(entries.size() == params.size(), ErrorKind::Validation,
          path + ": checkpoint has " + std::to_string(entries.size()) + " parameters, model has " +
              std::to_string(params.size()));
  for (const auto& e : entries) {
    const auto idx = params.find(e.name);
    require(idx.has_value(), ErrorKind::Validation, path + ": unknown parameter " + e.name);
    Parameter& p = params[*idx];
    require(p.value.shape() == e.value.shape(), ErrorKind::Validation,
            path + ": shape mismatch for " + e.name);
    p.value = e.value;
  }
}

}  // namespace fastmvs
