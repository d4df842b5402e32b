#pragma once

#include "qst/autodiff.hpp"

namespace qst {

/// Blend weight between the two loss terms; 1 trains on the approximated
/// Bures distance alone, 0 on MSE alone.
struct LossConfig {
  double beta = 0.09;
};

/// Mean over all entries of (alpha_hat - alpha)^2. Inputs (B, d^2) or a
/// single (d^2) vector; the batch loss equals the mean of per-sample
/// losses either way.
ad::Tensor mse_distance(const ad::Tensor& alpha_hat, const ad::Tensor& alpha);

/// Approximated Bures distance, batch mean of
///   1 - (alpha_hat . alpha) / (max(|alpha_hat|, 1e-12) * |alpha|).
/// Scale-invariant in alpha_hat; the epsilon guards only the prediction
/// norm. Throws DegenerateTarget if any target norm is <= 1e-12 (targets
/// produced by rho_to_alpha are unit-norm and never trip this).
ad::Tensor bures_approx(const ad::Tensor& alpha_hat, const ad::Tensor& alpha);

/// beta * bures_approx + (1 - beta) * mse_distance. beta = 0 reproduces
/// mse_distance bit-for-bit and beta = 1 reproduces bures_approx.
/// Throws ConfigError unless 0 <= beta <= 1.
ad::Tensor integrated_loss(const ad::Tensor& alpha_hat,
                           const ad::Tensor& alpha, const LossConfig& cfg);

}  // namespace qst
