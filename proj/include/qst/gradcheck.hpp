#pragma once

#include <functional>
#include <vector>

#include "qst/autodiff.hpp"
#include "qst/rng.hpp"

namespace qst::ad {

/// Builds a single-element output from the given leaves; must be
/// deterministic in their current data (it is re-invoked per perturbation).
using ScalarFn = std::function<Tensor(std::vector<Tensor>&)>;

/// Central finite-difference gradient check, h = 1e-5: runs one backward
/// pass for the analytic gradients, then perturbs every element of every
/// tracked input (+-h) with tape-free forwards. Returns the worst relative
/// error |analytic - numeric| / max(floor, |analytic|, |numeric|); the
/// floor keeps near-zero gradients from dividing by noise.
double gradient_check(const ScalarFn& fn, std::vector<Tensor> inputs,
                      double h = 1e-5, double floor = 1e-6);

/// Same check restricted to at most max_elems randomly chosen elements per
/// tracked input; for large parameter tensors where the full sweep is
/// quadratic.
double gradient_check_sampled(const ScalarFn& fn, std::vector<Tensor> inputs,
                              Eigen::Index max_elems, Rng& rng,
                              double h = 1e-5, double floor = 1e-6);

struct GradcheckResult {
  std::string name;
  double rel_err = 0.0;  // worst over all trials
  bool pass = false;
};

/// Finite-difference sweep over every differentiable primitive plus the
/// three end-to-end model losses. Each named check runs `trials` random
/// configurations (shapes and data reseeded per trial); the reported error
/// is the worst trial. Data is kept away from kinks (relu at 0, div near
/// 0) so the central difference is valid.
std::vector<GradcheckResult> run_gradient_suite(Eigen::Index trials,
                                                std::uint64_t seed,
                                                double tolerance = 1e-4);

}  // namespace qst::ad
