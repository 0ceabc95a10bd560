#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ddta/error.hpp"

namespace ddta {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array with an optional gradient slot of the same length.
template <typename Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<Real> data);

  static Tensor scalar(Real v) { return Tensor(Shape{1}, {v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t rank() const noexcept { return shape_.size(); }

  std::span<Real> data() noexcept { return data_; }
  std::span<const Real> data() const noexcept { return data_; }
  std::vector<Real>& storage() noexcept { return data_; }
  const std::vector<Real>& storage() const noexcept { return data_; }

  Real& operator[](std::size_t i) { return data_[i]; }
  const Real& operator[](std::size_t i) const { return data_[i]; }

  bool has_grad() const noexcept { return grad_.has_value(); }
  /// Allocates a zeroed gradient slot if absent.
  void attach_grad();
  void drop_grad() noexcept { grad_.reset(); }
  void zero_grad();
  std::span<Real> grad();
  std::span<const Real> grad() const;

  /// Same data, new shape with equal element count.
  Tensor reshaped(Shape shape) const;

  template <typename Other>
  Tensor<Other> cast() const {
    std::vector<Other> out(data_.begin(), data_.end());
    return Tensor<Other>(shape_, std::move(out));
  }

 private:
  Shape shape_;
  std::vector<Real> data_;
  std::optional<std::vector<Real>> grad_;
};

/// Non-owning view used by kernels; the referenced storage must outlive it.
template <typename Real>
struct TensorView {
  std::span<const Real> data;
  const Shape* shape = nullptr;

  std::size_t size() const noexcept { return data.size(); }
  const Shape& dims() const noexcept { return *shape; }
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace ddta
