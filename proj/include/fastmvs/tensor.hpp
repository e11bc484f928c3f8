#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fastmvs/error.hpp"

namespace fastmvs {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array of doubles. Value semantics; gradients live on the
/// Tape, not here.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    require(data_.size() == shape_numel(shape_), ErrorKind::Dimension,
            "data length " + std::to_string(data_.size()) + " does not match shape " +
                shape_string(shape_));
  }

  static Tensor scalar(double value) { return Tensor(Shape{1}, value); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  template <class... Index>
  double& operator()(Index... index) noexcept {
    return data_[offset(static_cast<std::size_t>(index)...)];
  }
  template <class... Index>
  double operator()(Index... index) const noexcept {
    return data_[offset(static_cast<std::size_t>(index)...)];
  }

  double item() const {
    require(data_.size() == 1, ErrorKind::Dimension,
            "item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  void fill(double value) { std::fill(data_.begin(), data_.end(), value); }

  Tensor reshaped(Shape shape) const {
    require(shape_numel(shape) == numel(), ErrorKind::Dimension,
            "cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    return Tensor(std::move(shape), data_);
  }

  bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  template <class... Index>
  std::size_t offset(Index... index) const noexcept {
    const std::size_t idx[] = {index...};
    std::size_t off = 0;
    for (std::size_t a = 0; a < sizeof...(Index); ++a) off = off * shape_[a] + idx[a];
    return off;
  }

  Shape shape_;
  std::vector<double> data_;
};

inline void require_shape(const Tensor& t, const Shape& expected, const char* what) {
  require(t.shape() == expected, ErrorKind::Dimension,
          std::string(what) + ": expected shape " + shape_string(expected) + ", got " +
              shape_string(t.shape()));
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  require(t.rank() == rank, ErrorKind::Dimension,
          std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
              shape_string(t.shape()));
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), ErrorKind::Dimension, "max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace fastmvs
