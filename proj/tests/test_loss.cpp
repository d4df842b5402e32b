#include <cmath>
#include <vector>

#include "doctest.h"
#include "qst/errors.hpp"
#include "qst/gradcheck.hpp"
#include "qst/loss.hpp"
#include "qst/rng.hpp"

using namespace qst;
using ad::Shape;
using ad::Tensor;

namespace {

Tensor random_alpha(Eigen::Index batch, Eigen::Index width, Rng& rng,
                    bool requires_grad = false) {
  Tensor t = Tensor::zeros({batch, width}, requires_grad);
  for (double& v : t.data()) v = rng.uniform(-1.0, 1.0);
  return t;
}

}  // namespace

TEST_CASE("mse distance basics") {
  Tensor a = Tensor::from_data({4}, {0.5, -0.25, 1.0, 0.0});
  CHECK(mse_distance(a, a).value() == 0.0);

  Tensor shifted = Tensor::from_data({4}, {1.5, 0.75, 2.0, 1.0});
  CHECK(mse_distance(shifted, a).value() == 1.0);  // all-ones difference

  Rng rng(80);
  Tensor x = random_alpha(3, 4, rng);
  Tensor y = random_alpha(3, 4, rng);
  CHECK(mse_distance(x, y).value() > 0.0);
}

TEST_CASE("mse gradient is 2(diff)/n") {
  Tensor target = Tensor::from_data({4}, {0.1, 0.2, 0.3, 0.4});
  Tensor pred = Tensor::from_data({4}, {0.5, 0.0, 1.0, -1.0}, true);
  Tensor loss = mse_distance(pred, target);
  loss.backward();
  for (int i = 0; i < 4; ++i) {
    const double want =
        2.0 * (pred.data()[std::size_t(i)] - target.data()[std::size_t(i)]) /
        4.0;
    CHECK(pred.grad()[std::size_t(i)] == doctest::Approx(want).epsilon(1e-14));
  }

  Rng rng(81);
  double err = ad::gradient_check(
      [&](std::vector<Tensor>& in) { return mse_distance(in[0], target); },
      {random_alpha(1, 4, rng, true)});
  CHECK(err <= 1e-6);
}

TEST_CASE("approximated Bures distance") {
  Tensor a = Tensor::from_data({4}, {0.6, 0.8, 0.0, 0.0});
  CHECK(bures_approx(a, a).value() <= 1e-12);

  Tensor doubled = Tensor::from_data({4}, {1.2, 1.6, 0.0, 0.0});
  CHECK(bures_approx(doubled, a).value() <= 1e-12);

  Tensor orth = Tensor::from_data({4}, {0.0, 0.0, 1.0, 0.0});
  CHECK(bures_approx(orth, a).value() == doctest::Approx(1.0).epsilon(1e-14));

  Tensor negated = Tensor::from_data({4}, {-0.6, -0.8, 0.0, 0.0});
  CHECK(bures_approx(negated, a).value() ==
        doctest::Approx(2.0).epsilon(1e-14));

  Tensor zero = Tensor::zeros({4});
  CHECK_THROWS_AS(bures_approx(a, zero), DegenerateTarget);
  // A zero prediction is guarded, not an error: cos term collapses to 0.
  CHECK(bures_approx(zero, a).value() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("bures_approx is scale invariant in the prediction") {
  Rng rng(82);
  Tensor target = random_alpha(5, 9, rng);
  Tensor pred = random_alpha(5, 9, rng);
  const double base = bures_approx(pred, target).value();
  CHECK(base >= 0.0);
  CHECK(base <= 2.0);
  for (double c : {0.5, 2.0, 10.0}) {
    Tensor scaled = ad::scale(pred, c);
    CHECK(std::abs(bures_approx(scaled, target).value() - base) <= 1e-10);
  }
}

TEST_CASE("bures_approx gradient w.r.t. prediction") {
  Rng rng(83);
  Tensor target = random_alpha(3, 6, rng);
  double err = ad::gradient_check(
      [&](std::vector<Tensor>& in) { return bures_approx(in[0], target); },
      {random_alpha(3, 6, rng, true)});
  CHECK(err <= 1e-6);
}

TEST_CASE("integrated loss blends the two terms") {
  Rng rng(84);
  Tensor target = random_alpha(4, 9, rng);
  Tensor pred = random_alpha(4, 9, rng);

  const double upsilon = bures_approx(pred, target).value();
  const double mu = mse_distance(pred, target).value();

  // Endpoint reductions are exact.
  CHECK(integrated_loss(pred, target, LossConfig{0.0}).value() == mu);
  CHECK(integrated_loss(pred, target, LossConfig{1.0}).value() == upsilon);

  const double got = integrated_loss(pred, target, LossConfig{0.09}).value();
  CHECK(got == doctest::Approx(0.09 * upsilon + 0.91 * mu).epsilon(1e-15));

  // Known components: 0.09 * 0.2 + 0.91 * 0.01 = 0.0271.
  CHECK(0.09 * 0.2 + 0.91 * 0.01 == doctest::Approx(0.0271).epsilon(1e-15));

  // Linearity in beta: three-point collinearity.
  const double l2 = integrated_loss(pred, target, LossConfig{0.2}).value();
  const double l5 = integrated_loss(pred, target, LossConfig{0.5}).value();
  const double l8 = integrated_loss(pred, target, LossConfig{0.8}).value();
  CHECK(std::abs(l5 - 0.5 * (l2 + l8)) <= 1e-12);

  CHECK_THROWS_AS(integrated_loss(pred, target, LossConfig{-0.1}),
                  ConfigError);
  CHECK_THROWS_AS(integrated_loss(pred, target, LossConfig{1.5}),
                  ConfigError);
}

TEST_CASE("batch losses equal the mean of per-sample losses") {
  Rng rng(85);
  const Eigen::Index batch = 7, width = 9;
  Tensor target = random_alpha(batch, width, rng);
  Tensor pred = random_alpha(batch, width, rng);

  double mse_sum = 0.0, bures_sum = 0.0;
  for (Eigen::Index b = 0; b < batch; ++b) {
    std::vector<double> ph(pred.data().begin() + b * width,
                           pred.data().begin() + (b + 1) * width);
    std::vector<double> th(target.data().begin() + b * width,
                           target.data().begin() + (b + 1) * width);
    Tensor p1 = Tensor::from_data({width}, std::move(ph));
    Tensor t1 = Tensor::from_data({width}, std::move(th));
    mse_sum += mse_distance(p1, t1).value();
    bures_sum += bures_approx(p1, t1).value();
  }
  CHECK(mse_distance(pred, target).value() ==
        doctest::Approx(mse_sum / double(batch)).epsilon(1e-12));
  CHECK(bures_approx(pred, target).value() ==
        doctest::Approx(bures_sum / double(batch)).epsilon(1e-12));
}

TEST_CASE("integrated loss gradient") {
  Rng rng(86);
  Tensor target = random_alpha(2, 4, rng);
  double err = ad::gradient_check(
      [&](std::vector<Tensor>& in) {
        return integrated_loss(in[0], target, LossConfig{0.09});
      },
      {random_alpha(2, 4, rng, true)});
  CHECK(err <= 1e-6);
}
