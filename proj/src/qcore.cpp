#include "qst/qcore.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>

#include "qst/errors.hpp"

namespace qst {

namespace {

Eigen::Index isqrt_exact(Eigen::Index n) {
  auto r = static_cast<Eigen::Index>(std::llround(std::sqrt(double(n))));
  if (r * r != n) {
    throw ShapeMismatch("alpha length " + std::to_string(n) +
                        " is not a perfect square");
  }
  return r;
}

}  // namespace

bool is_valid_density_matrix(const DensityMatrix& rho, double herm_tol,
                             double trace_tol, double eig_tol) {
  const ComplexMatrix& m = rho.mat;
  if (m.rows() != m.cols() || m.rows() == 0) return false;
  if (!m.allFinite()) return false;
  if ((m - m.adjoint()).cwiseAbs().maxCoeff() > herm_tol) return false;
  if (std::abs(m.trace() - std::complex<double>(1.0, 0.0)) > trace_tol)
    return false;
  Eigen::SelfAdjointEigenSolver<ComplexMatrix> es(m,
                                                  Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff() >= -eig_tol;
}

Eigen::Index alpha_dim(const RealVector& alpha) {
  return isqrt_exact(alpha.size());
}

ComplexMatrix alpha_to_lower(const RealVector& alpha) {
  const Eigen::Index d = alpha_dim(alpha);
  ComplexMatrix lower = ComplexMatrix::Zero(d, d);
  for (Eigen::Index i = 0; i < d; ++i) lower(i, i) = alpha(i);
  Eigen::Index k = d;
  for (Eigen::Index i = 1; i < d; ++i) {
    for (Eigen::Index j = 0; j < i; ++j) {
      lower(i, j) = std::complex<double>(alpha(k), alpha(k + 1));
      k += 2;
    }
  }
  return lower;
}

RealVector lower_to_alpha(const ComplexMatrix& lower) {
  const Eigen::Index d = lower.rows();
  RealVector alpha(d * d);
  for (Eigen::Index i = 0; i < d; ++i) alpha(i) = lower(i, i).real();
  Eigen::Index k = d;
  for (Eigen::Index i = 1; i < d; ++i) {
    for (Eigen::Index j = 0; j < i; ++j) {
      alpha(k) = lower(i, j).real();
      alpha(k + 1) = lower(i, j).imag();
      k += 2;
    }
  }
  return alpha;
}

DensityMatrix alpha_to_rho(const RealVector& alpha) {
  ComplexMatrix lower = alpha_to_lower(alpha);
  ComplexMatrix prod = lower * lower.adjoint();
  const double tr = prod.real().trace();
  if (!(tr > 1e-300)) {
    throw ZeroTrace("alpha factor has zero norm, state undefined");
  }
  // Multiply by the reciprocal: dividing a complex matrix by a double
  // promotes the scalar and squares it inside complex division, which
  // over/underflows for extreme (but representable) alpha scales.
  prod *= std::complex<double>(1.0 / tr, 0.0);
  // L L^dag / Tr is Hermitian PSD by construction; symmetrize to shed
  // rounding asymmetry before downstream eigensolves.
  DensityMatrix rho{(prod + prod.adjoint()) / 2.0};
  return rho;
}

RealVector rho_to_alpha(const DensityMatrix& rho) {
  const Eigen::Index d = rho.dim();
  constexpr double delta = 1e-9;
  ComplexMatrix reg = (1.0 - delta) * rho.mat +
                      delta / double(d) * ComplexMatrix::Identity(d, d);
  reg = (reg + reg.adjoint()) / 2.0;
  Eigen::LLT<ComplexMatrix> llt(reg);
  if (llt.info() != Eigen::Success) {
    throw NotPositive("density matrix is not positive definite after "
                      "regularization; input is likely corrupted");
  }
  ComplexMatrix lower = llt.matrixL();
  // Canonical factor: nonnegative diagonal. LLT already yields positive
  // diagonal entries, so scaling is a no-op guard against sign flips.
  for (Eigen::Index j = 0; j < d; ++j) {
    if (lower(j, j).real() < 0.0) lower.col(j) = -lower.col(j);
  }
  return lower_to_alpha(lower);
}

ComplexMatrix sqrt_psd(const ComplexMatrix& hermitian) {
  Eigen::SelfAdjointEigenSolver<ComplexMatrix> es(hermitian);
  if (es.eigenvalues().minCoeff() < -1e-10) {
    throw NotPositive("matrix square root of a non-PSD input, min "
                      "eigenvalue " +
                      std::to_string(es.eigenvalues().minCoeff()));
  }
  Eigen::VectorXd vals = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * vals.asDiagonal() *
         es.eigenvectors().adjoint();
}

double fidelity(const DensityMatrix& rho1, const DensityMatrix& rho2) {
  if (rho1.dim() != rho2.dim()) {
    throw DimensionMismatch("fidelity of " + std::to_string(rho1.dim()) +
                            "x" + std::to_string(rho1.dim()) + " vs " +
                            std::to_string(rho2.dim()) + "x" +
                            std::to_string(rho2.dim()));
  }
  // Tr sqrt(sqrt(rho1) rho2 sqrt(rho1)) = sum_i sqrt(lambda_i) with
  // lambda_i the eigenvalues of A^dag A for A = sqrt(rho2) sqrt(rho1),
  // i.e. the singular values of A. Taking them from the SVD instead of an
  // eigensolve of the formed product keeps near-zero sqrt(lambda_i)
  // accurate to machine precision (forming A^dag A squares the error).
  ComplexMatrix a = sqrt_psd(rho2.mat) * sqrt_psd(rho1.mat);
  Eigen::JacobiSVD<ComplexMatrix> svd(a);
  const double sum = svd.singularValues().sum();
  return std::clamp(sum * sum, 0.0, 1.0);
}

double bures_distance(const DensityMatrix& rho1, const DensityMatrix& rho2) {
  return 2.0 * (1.0 - std::sqrt(fidelity(rho1, rho2)));
}

double angle_metric(const DensityMatrix& rho1, const DensityMatrix& rho2) {
  return std::acos(std::clamp(std::sqrt(fidelity(rho1, rho2)), 0.0, 1.0));
}

double infidelity(const DensityMatrix& rho1, const DensityMatrix& rho2) {
  return 1.0 - fidelity(rho1, rho2);
}

double log_infidelity_of(double infid) {
  return std::log10(std::max(infid, 1e-16));
}

double log_infidelity(const DensityMatrix& rho1, const DensityMatrix& rho2) {
  return log_infidelity_of(infidelity(rho1, rho2));
}

}  // namespace qst
