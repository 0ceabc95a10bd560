#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

namespace ddta::rng {

/// SplitMix64 finalizer.
constexpr std::uint64_t mix(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Independent key for a named sub-stream of `seed`.
constexpr std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) noexcept {
  return mix(mix(seed) ^ (stream * 0xD1B54A32D192ED03ull));
}

/// Counter-based generator: value i is a pure function of (key, i), so any
/// element of a stream can be regenerated without replaying the prefix.
class CounterRng {
 public:
  explicit constexpr CounterRng(std::uint64_t key, std::uint64_t counter = 0) noexcept
      : key_(key), counter_(counter) {}

  static constexpr std::uint64_t at(std::uint64_t key, std::uint64_t i) noexcept {
    return mix(key ^ mix(i));
  }

  std::uint64_t next() noexcept { return at(key_, counter_++); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return double(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n), n > 0. Rejection keeps it unbiased.
  std::uint64_t below(std::uint64_t n) noexcept {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t v;
    do {
      v = next();
    } while (v >= limit);
    return v % n;
  }

  /// Standard normal via Box-Muller.
  double normal() noexcept {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_;
};

/// Fisher-Yates permutation of [0, n) drawn from `key`.
inline std::vector<std::size_t> permutation(std::size_t n, std::uint64_t key) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  CounterRng r(key);
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(r.below(i));
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

}  // namespace ddta::rng
