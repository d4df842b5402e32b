#include "qst/loss.hpp"

#include <cmath>

#include "qst/errors.hpp"

namespace qst {

using ad::Tensor;

namespace {

Tensor as_batch(const Tensor& t, const char* who) {
  if (t.ndim() == 1) return ad::reshape(t, {1, t.dim(0)});
  if (t.ndim() == 2) return t;
  throw ShapeMismatch(std::string(who) + ": want (batch, d^2) or (d^2), got " +
                      ad::shape_str(t.shape()));
}

void check_same(const Tensor& a, const Tensor& b, const char* who) {
  if (a.shape() != b.shape()) {
    throw ShapeMismatch(std::string(who) + ": " + ad::shape_str(a.shape()) +
                        " vs " + ad::shape_str(b.shape()));
  }
}

}  // namespace

Tensor mse_distance(const Tensor& alpha_hat, const Tensor& alpha) {
  Tensor h = as_batch(alpha_hat, "mse_distance");
  Tensor t = as_batch(alpha, "mse_distance");
  check_same(h, t, "mse_distance");
  Tensor diff = ad::sub(h, t);
  return ad::mean(ad::mul(diff, diff));
}

Tensor bures_approx(const Tensor& alpha_hat, const Tensor& alpha) {
  Tensor h = as_batch(alpha_hat, "bures_approx");
  Tensor t = as_batch(alpha, "bures_approx");
  check_same(h, t, "bures_approx");

  const Eigen::Index batch = t.dim(0), width = t.dim(1);
  for (Eigen::Index b = 0; b < batch; ++b) {
    double sumsq = 0.0;
    for (Eigen::Index j = 0; j < width; ++j) {
      const double v = t.data()[std::size_t(b * width + j)];
      sumsq += v * v;
    }
    if (std::sqrt(sumsq) <= 1e-12) {
      throw DegenerateTarget("bures_approx: target " + std::to_string(b) +
                             " has zero norm");
    }
  }

  Tensor dots = ad::sum_last(ad::mul(h, t));
  // max on the squared norm, not the norm: keeps the sqrt gradient finite
  // when a prediction is exactly zero (max passes no gradient below the
  // floor, and sqrt then differentiates at 1e-24, not at 0).
  Tensor norm_h =
      ad::sqrt_elem(ad::max_const(ad::sum_last(ad::mul(h, h)), 1e-24));
  Tensor norm_t = ad::sqrt_elem(ad::sum_last(ad::mul(t, t)));
  Tensor cosine = ad::div(dots, ad::mul(norm_h, norm_t));
  return ad::add_const(ad::scale(ad::mean(cosine), -1.0), 1.0);
}

Tensor integrated_loss(const Tensor& alpha_hat, const Tensor& alpha,
                       const LossConfig& cfg) {
  if (!(cfg.beta >= 0.0 && cfg.beta <= 1.0)) {
    throw ConfigError("integrated_loss: beta must lie in [0,1], got " +
                      std::to_string(cfg.beta));
  }
  Tensor upsilon = bures_approx(alpha_hat, alpha);
  Tensor mu = mse_distance(alpha_hat, alpha);
  return ad::add(ad::scale(upsilon, cfg.beta),
                 ad::scale(mu, 1.0 - cfg.beta));
}

}  // namespace qst
