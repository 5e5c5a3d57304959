#include "sstg/tensor.h"

#include <cmath>
#include <numeric>

namespace sstg {

Tensor::Tensor(std::vector<int> shape, double fill) : shape_(std::move(shape)) {
  std::int64_t n = 1;
  for (int d : shape_) {
    if (d <= 0) throw std::invalid_argument("Tensor: non-positive dimension");
    n *= d;
  }
  if (shape_.size() > 3) throw std::invalid_argument("Tensor: rank > 3 unsupported");
  data_.assign(static_cast<size_t>(n), fill);
}

Tensor::Tensor(std::initializer_list<double> values)
    : shape_{static_cast<int>(values.size())}, data_(values) {}

Tensor Tensor::scalar(double v) {
  Tensor t;
  t.shape_ = {};
  t.data_ = {v};
  return t;
}

Tensor Tensor::zeros_like(const Tensor& other) {
  Tensor t;
  t.shape_ = other.shape_;
  t.data_.assign(other.data_.size(), 0.0);
  return t;
}

std::string Tensor::shape_str() const {
  std::string s = "[";
  for (size_t i = 0; i < shape_.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape_[i]);
  }
  return s + "]";
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::add_scaled(const Tensor& other, double scale) {
  check_same_shape(*this, other, "add_scaled");
  const double* o = other.data();
  for (size_t i = 0; i < data_.size(); ++i) data_[i] += scale * o[i];
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::fabs(v));
  return m;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
}

} // namespace sstg
