#include <cmath>
#include <cstdint>
#include <vector>

#include "doctest.h"
#include "qst/rng.hpp"

using namespace qst;

TEST_CASE("splitmix64 reference outputs from seed 0") {
  // Known-answer values from the published SplitMix64 reference stream.
  Rng rng(0);
  CHECK(rng.next_u64() == 0xE220A8397B1DCDAFULL);
  CHECK(rng.next_u64() == 0x6E789E6AA1B965F4ULL);
  CHECK(rng.next_u64() == 0x06C45D188009454FULL);
}

TEST_CASE("uniform is in [0,1) with mean 1/2") {
  Rng rng(42);
  const int n = 100000;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    sum += u;
  }
  // 3 sigma of the sample mean, sigma = 1/sqrt(12 n).
  CHECK(std::abs(sum / n - 0.5) < 3.0 / std::sqrt(12.0 * n));
}

TEST_CASE("normal moments") {
  Rng rng(7);
  const int n = 100000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    double x = rng.normal();
    sum += x;
    sq += x * x;
  }
  double mean = sum / n;
  double var = sq / n - mean * mean;
  CHECK(std::abs(mean) < 3.0 / std::sqrt(double(n)));
  CHECK(std::abs(var - 1.0) < 0.03);
}

TEST_CASE("complex normal has independent unit-variance parts") {
  Rng rng(9);
  const int n = 100000;
  double re = 0, im = 0, re2 = 0, im2 = 0, cross = 0;
  for (int i = 0; i < n; ++i) {
    auto z = rng.complex_normal();
    re += z.real();
    im += z.imag();
    re2 += z.real() * z.real();
    im2 += z.imag() * z.imag();
    cross += z.real() * z.imag();
  }
  CHECK(std::abs(re / n) < 0.01);
  CHECK(std::abs(im / n) < 0.01);
  CHECK(std::abs(re2 / n - 1.0) < 0.03);
  CHECK(std::abs(im2 / n - 1.0) < 0.03);
  CHECK(std::abs(cross / n) < 0.01);
}

TEST_CASE("binomial edge cases") {
  Rng rng(1);
  CHECK(binomial_draw(0, 0.5, rng) == 0);
  CHECK(binomial_draw(100, 0.0, rng) == 0);
  CHECK(binomial_draw(100, 1.0, rng) == 100);
  for (int i = 0; i < 100; ++i) {
    auto k = binomial_draw(10, 0.3, rng);
    CHECK(k <= 10);
  }
}

TEST_CASE("binomial consumes exactly one uniform") {
  Rng a(123), b(123);
  (void)binomial_draw(1000000, 0.37, a);
  (void)b.uniform();
  CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("binomial matches exact pmf") {
  // n = 10, p = 0.3; each bin's empirical frequency within 4 sigma.
  Rng rng(2024);
  const int draws = 200000;
  const std::uint64_t n = 10;
  const double p = 0.3;
  std::vector<int> counts(n + 1, 0);
  for (int i = 0; i < draws; ++i) counts[binomial_draw(n, p, rng)]++;
  for (std::uint64_t k = 0; k <= n; ++k) {
    double pmf = std::exp(std::lgamma(double(n) + 1) -
                          std::lgamma(double(k) + 1) -
                          std::lgamma(double(n - k) + 1)) *
                 std::pow(p, double(k)) * std::pow(1 - p, double(n - k));
    double sigma = std::sqrt(pmf * (1 - pmf) / draws);
    CHECK(std::abs(double(counts[k]) / draws - pmf) < 4 * sigma + 1e-12);
  }
}

TEST_CASE("binomial mean and variance at large n") {
  Rng rng(5);
  const int draws = 20000;
  const std::uint64_t n = 100000;
  const double p = 0.2;
  double sum = 0, sq = 0;
  for (int i = 0; i < draws; ++i) {
    double k = double(binomial_draw(n, p, rng));
    sum += k;
    sq += k * k;
  }
  double mean = sum / draws;
  double var = sq / draws - mean * mean;
  double se_mean = std::sqrt(double(n) * p * (1 - p) / draws);
  CHECK(std::abs(mean - double(n) * p) < 4 * se_mean);
  CHECK(std::abs(var / (double(n) * p * (1 - p)) - 1.0) < 0.05);
}

TEST_CASE("multinomial counts sum to the trial count") {
  Rng rng(77);
  std::vector<double> probs{0.1, 0.2, 0.3, 0.4};
  for (int i = 0; i < 200; ++i) {
    auto counts = multinomial_draw(12345, probs, rng);
    std::uint64_t total = 0;
    for (auto c : counts) total += c;
    CHECK(total == 12345);
  }
}

TEST_CASE("multinomial deterministic given seed") {
  std::vector<double> probs{0.25, 0.25, 0.5};
  Rng a(99), b(99);
  CHECK(multinomial_draw(100000, probs, a) ==
        multinomial_draw(100000, probs, b));
}

TEST_CASE("multinomial with a certain outcome") {
  Rng rng(3);
  std::vector<double> probs{1.0, 0.0, 0.0};
  auto counts = multinomial_draw(500, probs, rng);
  CHECK(counts[0] == 500);
  CHECK(counts[1] == 0);
  CHECK(counts[2] == 0);
}

TEST_CASE("multinomial cell means match probabilities") {
  Rng rng(11);
  std::vector<double> probs{0.05, 0.15, 0.35, 0.45};
  const int draws = 5000;
  const std::uint64_t n = 1000;
  std::vector<double> sums(probs.size(), 0.0);
  for (int i = 0; i < draws; ++i) {
    auto counts = multinomial_draw(n, probs, rng);
    for (std::size_t j = 0; j < probs.size(); ++j)
      sums[j] += double(counts[j]) / double(n);
  }
  for (std::size_t j = 0; j < probs.size(); ++j) {
    double sigma =
        std::sqrt(probs[j] * (1 - probs[j]) / double(n) / double(draws));
    CHECK(std::abs(sums[j] / draws - probs[j]) < 4 * sigma);
  }
}
