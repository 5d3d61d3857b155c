#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "ptsm/rng.hpp"

namespace ptsm {

using i64 = std::int64_t;
using u64 = std::uint64_t;
using Shape = std::vector<i64>;

/// Dense row-major tensor of 64-bit floats. Value semantics: copies own their
/// storage, so tensors can move freely between threads.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, double fill);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor vector(std::vector<double> v);
  static Tensor matrix(i64 rows, i64 cols, std::vector<double> v);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor full(Shape shape, double v) { return Tensor(std::move(shape), v); }
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);
  static Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi);

  const Shape& shape() const { return shape_; }
  i64 rank() const { return static_cast<i64>(shape_.size()); }
  i64 dim(i64 i) const { return shape_[static_cast<size_t>(i)]; }
  i64 numel() const { return static_cast<i64>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](i64 i) { return data_[static_cast<size_t>(i)]; }
  double operator[](i64 i) const { return data_[static_cast<size_t>(i)]; }
  double& at(i64 i, i64 j) { return data_[static_cast<size_t>(i * dim(1) + j)]; }
  double at(i64 i, i64 j) const { return data_[static_cast<size_t>(i * dim(1) + j)]; }
  double& at(i64 i, i64 j, i64 k) {
    return data_[static_cast<size_t>((i * dim(1) + j) * dim(2) + k)];
  }
  double at(i64 i, i64 j, i64 k) const {
    return data_[static_cast<size_t>((i * dim(1) + j) * dim(2) + k)];
  }

  /// Value of a one-element tensor; contract error otherwise.
  double item() const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

  Tensor reshaped(Shape shape) const;

  void fill(double v);
  /// this += a * g (shapes must match).
  void add_scaled(const Tensor& g, double a);
  double max_abs() const;
  double sum() const;

  static std::string shape_str(const Shape& s);

 private:
  Shape shape_;
  std::vector<double> data_;
};

i64 shape_numel(const Shape& s);

}  // namespace ptsm
