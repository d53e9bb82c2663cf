#include "clm/tensor.hpp"

#include <cmath>
#include <stdexcept>

namespace clm {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <class Real>
Tensor<Real>::Tensor(Shape s, std::vector<Real> values) : shape(std::move(s)), data(std::move(values)) {
  if (shape_numel(shape) != data.size()) {
    throw std::invalid_argument("tensor shape " + shape_str(shape) + " does not match " +
                                std::to_string(data.size()) + " values");
  }
}

template <class Real>
Tensor<Real> Tensor<Real>::full(Shape s, Real value) {
  Tensor t(std::move(s));
  std::fill(t.data.begin(), t.data.end(), value);
  return t;
}

template <class Real>
Real Tensor<Real>::item() const {
  if (data.size() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_str(shape));
  return data[0];
}

template <class Real>
bool Tensor<Real>::all_finite() const {
  for (Real v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template struct Tensor<float>;
template struct Tensor<double>;

}  // namespace clm
