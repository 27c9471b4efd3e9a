#pragma once

// Deterministic randomness. Every stochastic routine in the library draws from
// an Rng constructed with a seed derived from (master seed, stream tags) via
// derive_seed, never from a shared global stream. That keeps results
// bit-identical across platforms, thread counts, and stage re-runs.

#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace dentalforge {

// splitmix64 finalizer; full-period bijective mixer.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// FNV-1a 64-bit; used to fold strings (item ids, file bytes) into seed material.
inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

namespace detail {
inline std::uint64_t seed_part(std::uint64_t v) { return v; }
inline std::uint64_t seed_part(std::string_view s) { return fnv1a64(s); }
}  // namespace detail

// Counter-based stream derivation: mixes a root seed with any number of
// integer or string parts. Same parts -> same seed, order-sensitive.
template <typename... Parts>
inline std::uint64_t derive_seed(std::uint64_t root, const Parts&... parts) {
  std::uint64_t acc = mix64(root ^ 0x6a09e667f3bcc909ull);
  ((acc = mix64(acc ^ detail::seed_part(parts))), ...);
  return acc;
}

// mt19937_64 is fully specified by the standard, so its raw output is
// portable; the distribution helpers below are hand-rolled because the
// standard's <random> distributions are not bit-reproducible across vendors.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t raw() { return gen_(); }

  // uniform double in [0, 1) with 53 random bits
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // unbiased integer in [0, n) via rejection sampling
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
    const std::uint64_t umax = std::numeric_limits<std::uint64_t>::max();
    const std::uint64_t limit = umax - umax % n;
    std::uint64_t x = gen_();
    while (x >= limit) x = gen_();
    return x % n;
  }

  // Fisher-Yates
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // index draw from non-negative (possibly unnormalized) weights
  std::size_t categorical(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0) || w > std::numeric_limits<double>::max())
        throw std::invalid_argument("Rng::categorical: weights must be finite and non-negative");
      total += w;
    }
    if (!(total > 0.0)) throw std::invalid_argument("Rng::categorical: total weight must be positive");
    double u = uniform() * total;
    double cum = 0.0;
    std::size_t last_positive = weights.size();
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (weights[i] > 0.0) last_positive = i;
      cum += weights[i];
      if (u < cum) return i;
    }
    // floating accumulation can leave u just past the final cum; clamp to the
    // last index that actually had mass
    return last_positive;
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace dentalforge
