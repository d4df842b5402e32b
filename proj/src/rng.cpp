#include "qst/rng.hpp"

#include <algorithm>

namespace qst {

namespace {

double log_binom_pmf(std::uint64_t n, std::uint64_t k, double p) {
  double nn = static_cast<double>(n);
  double kk = static_cast<double>(k);
  return std::lgamma(nn + 1.0) - std::lgamma(kk + 1.0) - std::lgamma(nn - kk + 1.0) +
         kk * std::log(p) + (nn - kk) * std::log1p(-p);
}

}  // namespace

std::uint64_t binomial_draw(std::uint64_t n, double p, Rng& rng) {
  if (n == 0 || p <= 0.0) return 0;
  if (p >= 1.0) return n;

  double u = rng.uniform();

  // Anchor the pmf at the mode; neighbors follow from the one-step ratio
  //   pmf(k+1)/pmf(k) = (n-k)/(k+1) * p/(1-p).
  std::uint64_t mode = static_cast<std::uint64_t>((static_cast<double>(n) + 1.0) * p);
  mode = std::min(mode, n);
  double pmf_mode = std::exp(log_binom_pmf(n, mode, p));
  double odds = p / (1.0 - p);

  double acc = pmf_mode;
  if (u < acc) return mode;

  // Walk outward, alternating above/below the mode.
  std::uint64_t up = mode;       // last k enumerated above
  std::uint64_t down = mode;     // last k enumerated below
  double pmf_up = pmf_mode;
  double pmf_down = pmf_mode;
  bool can_up = up < n;
  bool can_down = down > 0;
  std::uint64_t last = mode;
  while (can_up || can_down) {
    if (can_up) {
      pmf_up *= static_cast<double>(n - up) / static_cast<double>(up + 1) * odds;
      ++up;
      acc += pmf_up;
      last = up;
      if (u < acc) return up;
      can_up = up < n;
    }
    if (can_down) {
      pmf_down *= static_cast<double>(down) / (static_cast<double>(n - down + 1) * odds);
      --down;
      acc += pmf_down;
      last = down;
      if (u < acc) return down;
      can_down = down > 0;
    }
  }
  // Accumulated mass fell short of u by rounding; any remaining gap is
  // O(eps). Return the last enumerated outcome.
  return last;
}

std::vector<std::uint64_t> multinomial_draw(std::uint64_t n_trials,
                                            const std::vector<double>& probs,
                                            Rng& rng) {
  std::vector<std::uint64_t> counts(probs.size(), 0);
  std::uint64_t remaining = n_trials;
  double mass_left = 1.0;
  for (std::size_t i = 0; i + 1 < probs.size(); ++i) {
    if (remaining == 0) break;
    double cond = probs[i] / mass_left;
    cond = std::clamp(cond, 0.0, 1.0);
    std::uint64_t c = binomial_draw(remaining, cond, rng);
    counts[i] = c;
    remaining -= c;
    mass_left -= probs[i];
    if (mass_left <= 0.0) {
      // Probability mass exhausted; dump what is left into this bin.
      counts[i] += remaining;
      remaining = 0;
      break;
    }
  }
  if (!counts.empty()) counts.back() += remaining;
  return counts;
}

}  // namespace qst
