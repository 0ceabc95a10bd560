#include "ddta/functional.hpp"

#include <cmath>

#include "ddta/graph.hpp"

namespace ddta {

template <typename Real>
std::vector<Real> softmax_with_temperature(std::span<const Real> logits,
                                           double temperature) {
  if (logits.empty()) throw ShapeError("softmax_with_temperature: empty input");
  Graph<Real> g;
  const auto z = g.borrow(logits, Shape{logits.size()});
  const auto p = softmax(g, z, temperature);
  auto v = g.value(p);
  return {v.begin(), v.end()};
}

template <typename Real>
Real cross_entropy_soft(std::span<const Real> predicted,
                        std::span<const Real> target) {
  if (predicted.size() != target.size() || predicted.empty()) {
    throw ShapeError("cross_entropy_soft: length mismatch (" +
                     std::to_string(predicted.size()) + " vs " +
                     std::to_string(target.size()) + ")");
  }
  Graph<Real> g;
  const auto p = g.borrow(predicted, Shape{predicted.size()});
  Tensor<Real> t(Shape{target.size()},
                 std::vector<Real>(target.begin(), target.end()));
  return g.value(cross_entropy(g, p, t))[0];
}

template <typename Real>
std::size_t argmax(std::span<const Real> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

template <typename Real>
double entropy(std::span<const Real> p) {
  double h = 0;
  for (auto x : p) {
    if (x > 0) h -= double(x) * std::log(double(x));
  }
  return h;
}

template std::vector<float> softmax_with_temperature(std::span<const float>, double);
template std::vector<double> softmax_with_temperature(std::span<const double>, double);
template float cross_entropy_soft(std::span<const float>, std::span<const float>);
template double cross_entropy_soft(std::span<const double>, std::span<const double>);
template std::size_t argmax(std::span<const float>);
template std::size_t argmax(std::span<const double>);
template double entropy(std::span<const float>);
template double entropy(std::span<const double>);

}  // namespace ddta
