#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace clm {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major tensor. `Real` is float for training storage and double for
// verification runs.
template <class Real>
struct Tensor {
  Shape shape;
  std::vector<Real> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), Real(0)) {}
  Tensor(Shape s, std::vector<Real> values);

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, Real value);
  static Tensor scalar(Real value) { return Tensor(Shape{}, {value}); }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  // Size of the last dimension (1 for scalars).
  std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }

  Real item() const;
  Real& operator[](std::size_t i) { return data[i]; }
  Real operator[](std::size_t i) const { return data[i]; }

  template <class Other>
  Tensor<Other> cast() const {
    Tensor<Other> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }

  bool all_finite() const;
  bool operator==(const Tensor&) const = default;
};

extern template struct Tensor<float>;
extern template struct Tensor<double>;

}  // namespace clm
