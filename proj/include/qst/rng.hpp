#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <vector>

namespace qst {

/// SplitMix64: a 64-bit counter-based generator (Steele, Lea & Flood 2014).
/// The state advances by a fixed odd constant and each output is a finalizer
/// hash of the counter, so streams seeded with different values are
/// independent for practical purposes and reproduce bit-identically from a
/// seed. All randomness in the project flows through this generator.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; generates pairs and caches the second.
  double normal() {
    if (has_cache_) {
      has_cache_ = false;
      return cache_;
    }
    double u1 = uniform();
    double u2 = uniform();
    // Guard log(0); u1 = 0 occurs with probability 2^-53.
    double r = std::sqrt(-2.0 * std::log(u1 + 0x1.0p-60));
    double t = 6.283185307179586476925286766559 * u2;
    cache_ = r * std::sin(t);
    has_cache_ = true;
    return r * std::cos(t);
  }

  /// Complex standard normal: independent N(0,1) real and imaginary parts,
  /// produced from one Box-Muller pair.
  std::complex<double> complex_normal() {
    double u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1 + 0x1.0p-60));
    double t = 6.283185307179586476925286766559 * u2;
    return {r * std::cos(t), r * std::sin(t)};
  }

 private:
  std::uint64_t state_;
  double cache_ = 0.0;
  bool has_cache_ = false;
};

/// Exact Binomial(n, p) sample by inversion. Outcomes are enumerated from the
/// mode outward (m, m+1, m-1, m+2, ...), a fixed order that keeps the pmf
/// accumulation free of underflow; expected work is O(sqrt(n p (1-p))).
/// Consumes exactly one uniform from the stream.
std::uint64_t binomial_draw(std::uint64_t n, double p, Rng& rng);

/// Multinomial(n_trials, probs) by sequential binomial decomposition:
/// counts[0] ~ B(n, p0), counts[1] ~ B(n - counts[0], p1 / (1 - p0)), ...
/// Deterministic given the stream; consumes one uniform per bin except the
/// last.
std::vector<std::uint64_t> multinomial_draw(std::uint64_t n_trials,
                                            const std::vector<double>& probs,
                                            Rng& rng);

}  // namespace qst
