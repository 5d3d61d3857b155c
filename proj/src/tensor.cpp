#include "ptsm/tensor.hpp"

#include <cmath>
#include <sstream>

#include "ptsm/errors.hpp"

namespace ptsm {

i64 shape_numel(const Shape& s) {
  i64 n = 1;
  for (i64 d : s) {
    check_contract(d > 0, "tensor dimensions must be positive, got " + Tensor::shape_str(s));
    n *= d;
  }
  return n;
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0);
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  data_.assign(static_cast<size_t>(shape_numel(shape_)), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_contract(shape_numel(shape_) == static_cast<i64>(data_.size()),
                 "tensor data length does not match shape " + shape_str(shape_));
}

Tensor Tensor::vector(std::vector<double> v) {
  i64 n = static_cast<i64>(v.size());
  return Tensor({n}, std::move(v));
}

Tensor Tensor::matrix(i64 rows, i64 cols, std::vector<double> v) {
  return Tensor({rows, cols}, std::move(v));
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  for (i64 i = 0; i < t.numel(); ++i) t[i] = stddev * rng.normal();
  return t;
}

Tensor Tensor::rand_uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (i64 i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

double Tensor::item() const {
  check_contract(numel() == 1, "item() requires a one-element tensor, got " + shape_str(shape_));
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor Tensor::reshaped(Shape shape) const {
  check_contract(shape_numel(shape) == numel(),
                 "reshape " + shape_str(shape_) + " -> " + shape_str(shape) + " changes size");
  Tensor t = *this;
  t.shape_ = std::move(shape);
  return t;
}

void Tensor::fill(double v) { data_.assign(data_.size(), v); }

void Tensor::add_scaled(const Tensor& g, double a) {
  check_contract(same_shape(g), "add_scaled shape mismatch");
  for (size_t i = 0; i < data_.size(); ++i) data_[i] += a * g.data_[i];
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::fabs(v));
  return m;
}

double Tensor::sum() const {
  double s = 0.0;
  for (double v : data_) s += v;
  return s;
}

std::string Tensor::shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ')';
  return os.str();
}

}  // namespace ptsm
