#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "isonas/errors.hpp"

namespace isonas {

/// (batch, channels, height, width)
struct Shape4 {
  std::size_t batch = 0;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  constexpr std::size_t size() const { return batch * channels * height * width; }
  constexpr std::size_t plane() const { return height * width; }
  constexpr std::size_t per_sample() const { return channels * height * width; }

  friend constexpr bool operator==(const Shape4&, const Shape4&) = default;
};

inline std::string to_string(const Shape4& s) {
  return "(" + std::to_string(s.batch) + ", " + std::to_string(s.channels) + ", " +
         std::to_string(s.height) + ", " + std::to_string(s.width) + ")";
}

/// Dense rank-4 array of doubles in NCHW order.
class Tensor4 {
 public:
  Tensor4() = default;

  explicit Tensor4(Shape4 shape, double fill = 0.0) : shape_(shape), data_(shape.size(), fill) {}

  Tensor4(Shape4 shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.size()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + to_string(shape_));
    }
  }

  const Shape4& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t b, std::size_t c, std::size_t y, std::size_t x) {
    return data_[index(b, c, y, x)];
  }
  double operator()(std::size_t b, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[index(b, c, y, x)];
  }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  /// Contiguous H*W plane of one (sample, channel).
  std::span<double> plane(std::size_t b, std::size_t c) {
    return {data_.data() + index(b, c, 0, 0), shape_.plane()};
  }
  std::span<const double> plane(std::size_t b, std::size_t c) const {
    return {data_.data() + index(b, c, 0, 0), shape_.plane()};
  }

  std::span<const double> sample(std::size_t b) const {
    return {data_.data() + b * shape_.per_sample(), shape_.per_sample()};
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  Tensor4& operator+=(const Tensor4& other) {
    require_same_shape(other, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  Tensor4& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }

  /// Copy of samples [begin, end).
  Tensor4 slice_batch(std::size_t begin, std::size_t end) const {
    if (begin > end || end > shape_.batch) throw DimensionError("batch slice out of range");
    Shape4 s = shape_;
    s.batch = end - begin;
    const auto per = shape_.per_sample();
    return Tensor4(s, std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(begin * per),
                                          data_.begin() + static_cast<std::ptrdiff_t>(end * per)));
  }

  double sum() const {
    double s = 0.0;
    for (double v : data_) s += v;
    return s;
  }

  double dot(const Tensor4& other) const {
    require_same_shape(other, "dot");
    double s = 0.0;
    for (std::size_t i = 0; i < data_.size(); ++i) s += data_[i] * other.data_[i];
    return s;
  }

  double squared_norm() const { return dot(*this); }

  void require_same_shape(const Tensor4& other, const char* op) const {
    if (!(shape_ == other.shape_)) {
      throw DimensionError(std::string("shape mismatch in ") + op + ": " + to_string(shape_) +
                           " vs " + to_string(other.shape_));
    }
  }

 private:
  std::size_t index(std::size_t b, std::size_t c, std::size_t y, std::size_t x) const {
    return ((b * shape_.channels + c) * shape_.height + y) * shape_.width + x;
  }

  Shape4 shape_{};
  std::vector<double> data_;
};

}  // namespace isonas
