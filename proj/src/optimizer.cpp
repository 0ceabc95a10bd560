#include "ddta/optimizer.hpp"

#include <cmath>
#include <string>
#include <utility>

namespace ddta {

OptimizerState OptimizerState::sgd(double lr, double momentum, double decay) {
  OptimizerState s;
  s.kind = OptimizerKind::kSgdMomentum;
  s.learning_rate = lr;
  s.momentum = momentum;
  s.decay = decay;
  return s;
}

OptimizerState OptimizerState::adam(double lr) {
  OptimizerState s;
  s.kind = OptimizerKind::kAdam;
  s.learning_rate = lr;
  return s;
}

template <typename Real>
void optimizer_step(OptimizerState& state, std::span<Tensor<Real>* const> params) {
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!params[k]->has_grad()) {
      throw InvalidArgument("optimizer_step: parameter " + std::to_string(k) +
                            " has no gradient");
    }
  }
  if (state.first.empty()) {
    state.first.resize(params.size());
    if (state.kind == OptimizerKind::kAdam) state.second.resize(params.size());
    for (std::size_t k = 0; k < params.size(); ++k) {
      state.first[k].assign(params[k]->size(), 0.0);
      if (state.kind == OptimizerKind::kAdam) state.second[k].assign(params[k]->size(), 0.0);
    }
  }
  if (state.first.size() != params.size()) {
    throw ShapeError("optimizer_step: parameter list changed between steps");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (state.first[k].size() != params[k]->size()) {
      throw ShapeError("optimizer_step: parameter " + std::to_string(k) +
                       " changed size between steps");
    }
  }
  ++state.step;

  if (state.kind == OptimizerKind::kSgdMomentum) {
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto p = params[k]->data();
      auto g = std::as_const(*params[k]).grad();
      auto& v = state.first[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        v[i] = state.momentum * v[i] -
               state.learning_rate * (double(g[i]) + state.decay * double(p[i]));
        p[i] = static_cast<Real>(double(p[i]) + v[i]);
      }
    }
    return;
  }

  const double t = double(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k]->data();
    auto g = std::as_const(*params[k]).grad();
    auto& m = state.first[k];
    auto& v = state.second[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p[i] = static_cast<Real>(double(p[i]) -
                               state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon));
    }
  }
}

template void optimizer_step<float>(OptimizerState&, std::span<Tensor<float>* const>);
template void optimizer_step<double>(OptimizerState&, std::span<Tensor<double>* const>);

}  // namespace ddta
