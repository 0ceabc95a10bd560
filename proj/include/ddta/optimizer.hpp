#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ddta/tensor.hpp"

namespace ddta {

enum class OptimizerKind { kSgdMomentum, kAdam };

/// Training uses SGD with momentum and L2 parameter decay; attacks use Adam.
struct OptimizerState {
  OptimizerKind kind = OptimizerKind::kSgdMomentum;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  // Velocity (sgd) or first moment (adam), and second moment (adam only).
  std::vector<std::vector<double>> first;
  std::vector<std::vector<double>> second;

  static OptimizerState sgd(double lr, double momentum, double decay);
  static OptimizerState adam(double lr);
};

/// v <- momentum*v - lr*(g + decay*p); p <- p + v            (sgd)
/// bias-corrected first/second moment update                 (adam)
/// Buffers are created on the first call and must keep matching shapes.
template <typename Real>
void optimizer_step(OptimizerState& state, std::span<Tensor<Real>* const> params);

}  // namespace ddta
