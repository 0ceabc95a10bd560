#pragma once

#include <span>
#include <vector>

namespace ddta {

/// softmax(z / T) with max subtraction. Throws on T <= 0 or non-finite input.
template <typename Real>
std::vector<Real> softmax_with_temperature(std::span<const Real> logits,
                                           double temperature);

/// -sum_i target_i * log(max(predicted_i, 1e-12)).
template <typename Real>
Real cross_entropy_soft(std::span<const Real> predicted,
                        std::span<const Real> target);

/// Lowest index among equal maxima.
template <typename Real>
std::size_t argmax(std::span<const Real> v);

/// Shannon entropy in nats; zero-probability terms contribute 0.
template <typename Real>
double entropy(std::span<const Real> p);

}  // namespace ddta
