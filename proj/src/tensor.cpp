#include "ddta/tensor.hpp"

#include <algorithm>
#include <functional>
#include <numeric>

namespace ddta {

std::size_t numel(const Shape& shape) {
  if (shape.empty()) return 0;
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have rank >= 1");
  for (auto d : shape) {
    if (d == 0) {
      throw ShapeError("tensor dimensions must be positive, got " +
                       shape_string(shape));
    }
  }
}

}  // namespace

template <typename Real>
Tensor<Real>::Tensor(Shape shape) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(numel(shape_), Real(0));
}

template <typename Real>
Tensor<Real>::Tensor(Shape shape, std::vector<Real> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (numel(shape_) != data_.size()) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_string(shape_));
  }
}

template <typename Real>
void Tensor<Real>::attach_grad() {
  if (!grad_) grad_.emplace(data_.size(), Real(0));
}

template <typename Real>
void Tensor<Real>::zero_grad() {
  if (grad_) std::fill(grad_->begin(), grad_->end(), Real(0));
}

template <typename Real>
std::span<Real> Tensor<Real>::grad() {
  if (!grad_) throw InvalidArgument("tensor has no gradient attached");
  return *grad_;
}

template <typename Real>
std::span<const Real> Tensor<Real>::grad() const {
  if (!grad_) throw InvalidArgument("tensor has no gradient attached");
  return *grad_;
}

template <typename Real>
Tensor<Real> Tensor<Real>::reshaped(Shape shape) const {
  if (numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_string(shape_) + " to " +
                     shape_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace ddta
