#pragma once

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include "xmodal/core.hpp"

namespace xmodal {

// Dense row-major tensor of doubles. Image batches are laid out {N, C, H, W}.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape)
      : shape_(std::move(shape)), data_(checked_numel(shape_), real(0)) {}
  Tensor(std::vector<int> shape, std::vector<real> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::size_t>(checked_numel(shape_)) != data_.size())
      throw ShapeError("tensor data does not match shape");
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, real v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor scalar(real v) { return full({1}, v); }

  static Tensor randn(Rng& rng, std::vector<int> shape, real stddev = 1.0) {
    Tensor t(std::move(shape));
    std::normal_distribution<real> dist(0.0, stddev);
    for (auto& v : t.data_) v = dist(rng);
    return t;
  }

  static Tensor uniform(Rng& rng, std::vector<int> shape, real lo, real hi) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<real> dist(lo, hi);
    for (auto& v : t.data_) v = dist(rng);
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  real* data() { return data_.data(); }
  const real* data() const { return data_.data(); }
  std::vector<real>& vec() { return data_; }
  const std::vector<real>& vec() const { return data_; }

  real& operator[](std::size_t i) { return data_[i]; }
  real operator[](std::size_t i) const { return data_[i]; }

  // Convenience accessors for the common ranks; not for hot loops.
  real& at2(int a, int b) { return data_[idx2(a, b)]; }
  real at2(int a, int b) const { return data_[idx2(a, b)]; }
  real& at3(int a, int b, int c) { return data_[idx3(a, b, c)]; }
  real at3(int a, int b, int c) const { return data_[idx3(a, b, c)]; }
  real& at4(int n, int c, int h, int w) { return data_[idx4(n, c, h, w)]; }
  real at4(int n, int c, int h, int w) const { return data_[idx4(n, c, h, w)]; }

  std::size_t idx2(int a, int b) const {
    return static_cast<std::size_t>(a) * shape_[1] + b;
  }
  std::size_t idx3(int a, int b, int c) const {
    return (static_cast<std::size_t>(a) * shape_[1] + b) * shape_[2] + c;
  }
  std::size_t idx4(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) *
               shape_[3] +
           w;
  }

  void fill(real v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](real v) { return std::isfinite(v); });
  }

  real min() const { return *std::min_element(data_.begin(), data_.end()); }
  real max() const { return *std::max_element(data_.begin(), data_.end()); }
  real sum() const { return std::accumulate(data_.begin(), data_.end(), real(0)); }
  real mean() const { return empty() ? real(0) : sum() / static_cast<real>(numel()); }

  real abs_max() const {
    real m = 0;
    for (real v : data_) m = std::max(m, std::abs(v));
    return m;
  }

  std::uint64_t checksum() const {
    std::uint64_t h = fnv1a64(shape_.data(), shape_.size() * sizeof(int));
    return fnv1a64(data_.data(), data_.size() * sizeof(real), h);
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << '{';
    for (std::size_t i = 0; i < shape_.size(); ++i)
      os << (i ? "," : "") << shape_[i];
    os << '}';
    return os.str();
  }

  static std::size_t checked_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
      if (d <= 0) throw ShapeError("non-positive tensor dimension");
      n *= static_cast<std::size_t>(d);
    }
    return shape.empty() ? 0 : n;
  }

 private:
  std::vector<int> shape_;
  std::vector<real> data_;
};

inline std::size_t numel_of(const std::vector<int>& shape) {
  return Tensor::checked_numel(shape);
}

inline void require_shape(const Tensor& t, const std::vector<int>& shape,
                          const char* what) {
  if (t.shape() != shape)
    throw ShapeError(std::string(what) + ": expected shape mismatch, got " +
                     t.shape_str());
}

inline void require_same_shape(const Tensor& a, const Tensor& b,
                               const char* what) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(what) + ": shapes " + a.shape_str() + " vs " +
                     b.shape_str());
}

}  // namespace xmodal
