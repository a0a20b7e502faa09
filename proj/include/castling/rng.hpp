#pragma once

#include <cstdint>
#include <cmath>

namespace castling {

// SplitMix64 (Steele, Lea, Flood 2014). Chosen over std::mt19937 +
// std::uniform_real_distribution because the standard distributions are
// implementation-defined: the same seed gives different streams on different
// standard libraries, which would break cross-platform reproducibility of
// datasets, inits and benchmarks. SplitMix64 is 8 lines and fully pinned.
class SplitMix64 {
public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform double in [0, 1): top 53 bits scaled by 2^-53. This mapping is
  // part of the reproducibility contract; do not swap in std distributions.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Standard normal via Box-Muller on two fixed-order draws.
  double normal() {
    double u1 = next_double();
    double u2 = next_double();
    if (u1 < 1e-300) u1 = 1e-300;
    constexpr double two_pi = 6.283185307179586476925286766559;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

  // Uniform integer in [0, n). Rejection-free modulo is fine here: n is tiny
  // (class counts, index shuffles) relative to 2^64 so the bias is ~n/2^64.
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

private:
  std::uint64_t state_;
};

} // namespace castling
