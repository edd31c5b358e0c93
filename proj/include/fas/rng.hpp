// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

#include "fas/errors.hpp"
#include "fas/tensor.hpp"

namespace fas {

namespace detail {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

/// Counter-based generator: the i-th draw is a pure function of (seed, i), so
/// streams are reproducible on every platform and can be positioned freely.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t position = 0) : seed_(seed), position_(position) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t position() const noexcept { return position_; }

  std::uint64_t next_u64() {
    const std::uint64_t key = detail::mix64(seed_);
    return detail::mix64(key + (position_++ + 1) * detail::kGolden);
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw ParameterError("Rng::below(0)");
    // Rejection sampling keeps the result unbiased.
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via Box-Muller; consumes exactly two draws.
  double normal() {
    const double u1 = 1.0 - uniform01();
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Independent named stream derived from this seed (position is not consulted).
  Rng substream(std::string_view name) const {
    return Rng(detail::mix64(seed_ ^ detail::fnv1a(name)));
  }

  template <class T>
  std::vector<T> permutation(std::size_t n) {
    std::vector<T> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = static_cast<T>(i);
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[below(i)]);
    return idx;
  }

 private:
  std::uint64_t seed_;
  std::uint64_t position_;
};

/// Tensor of i.i.d. uniform values in [lo, hi).
inline Tensor rng_uniform(Rng& rng, double lo, double hi, Shape shape) {
  if (!(lo < hi)) throw ParameterError("rng_uniform: require lo < hi, got lo=" + std::to_string(lo) +
                                       " hi=" + std::to_string(hi));
  Tensor out(std::move(shape));
  const float hi_f = static_cast<float>(hi);
  for (float& v : out.data()) {
    float x = static_cast<float>(rng.uniform(lo, hi));
    if (x >= hi_f) x = std::nextafter(hi_f, static_cast<float>(lo));
    v = x;
  }
  return out;
}

inline Tensor rng_normal(Rng& rng, double stddev, Shape shape) {
  Tensor out(std::move(shape));
  for (float& v : out.data()) v = static_cast<float>(stddev * rng.normal());
  return out;
}

}  // namespace fas
