#pragma once

#include <Eigen/Dense>
#include <complex>

namespace qst {

using ComplexMatrix = Eigen::MatrixXcd;
using RealVector = Eigen::VectorXd;

/// Density matrix: Hermitian, positive semi-definite, unit trace. The
/// invariants are checked by validate(), not enforced on construction, so
/// intermediate states produced by numerics can be inspected before use.
struct DensityMatrix {
  ComplexMatrix mat;

  DensityMatrix() = default;
  explicit DensityMatrix(ComplexMatrix m) : mat(std::move(m)) {}

  Eigen::Index dim() const { return mat.rows(); }
};

/// Tolerances shared by the DensityMatrix invariants.
inline constexpr double kHermitianTol = 1e-10;
inline constexpr double kTraceTol = 1e-10;
inline constexpr double kEigenvalueTol = 1e-10;

/// True iff mat is Hermitian (max elementwise deviation), unit trace, and has
/// min eigenvalue >= -kEigenvalueTol.
bool is_valid_density_matrix(const DensityMatrix& rho,
                             double herm_tol = kHermitianTol,
                             double trace_tol = kTraceTol,
                             double eig_tol = kEigenvalueTol);

/// Length-d^2 real parameterization of a lower-triangular factor rho_L:
/// [d diagonal entries, then for each row i > j in row-major lower-triangle
/// order: Re(rho_L[i][j]), Im(rho_L[i][j])].
///
/// rho = rho_L rho_L^dag / Tr(rho_L rho_L^dag). The inverse direction uses a
/// canonical Cholesky factor (nonnegative diagonal), making the vector unique
/// per state.
ComplexMatrix alpha_to_lower(const RealVector& alpha);
RealVector lower_to_alpha(const ComplexMatrix& lower);

/// Dimension d from an alpha vector length d^2. Throws ShapeMismatch when the
/// length is not a perfect square.
Eigen::Index alpha_dim(const RealVector& alpha);

/// rho = L L^dag / Tr(L L^dag). Throws ZeroTrace when Tr(L L^dag) <= 1e-300.
/// Output satisfies all DensityMatrix invariants for any finite input.
DensityMatrix alpha_to_rho(const RealVector& alpha);

/// Canonical Cholesky factor of (1 - delta) rho + delta I / d with
/// delta = 1e-9; the mixing keeps rank-deficient (pure) states factorizable
/// while perturbing fidelity by far less than 1e-7. Throws NotPositive when
/// the regularized matrix still fails Cholesky.
RealVector rho_to_alpha(const DensityMatrix& rho);

/// Uhlmann fidelity (Tr sqrt(sqrt(rho1) rho2 sqrt(rho1)))^2, computed as
/// (sum_i sqrt(lambda_i))^2 over the eigenvalues of sqrt(rho1) rho2
/// sqrt(rho1). The sqrt(lambda_i) are evaluated as singular values of
/// sqrt(rho2) sqrt(rho1), which is the same quantity in exact arithmetic
/// but loses no precision on near-zero eigenvalues; matrix square roots via
/// Hermitian eigendecomposition. Result clamped to [0, 1]. Symmetric within
/// 1e-9.
double fidelity(const DensityMatrix& rho1, const DensityMatrix& rho2);

/// Bures distance 2 (1 - sqrt(F)).
double bures_distance(const DensityMatrix& rho1, const DensityMatrix& rho2);

/// Angle metric arccos(sqrt(F)), in [0, pi/2].
double angle_metric(const DensityMatrix& rho1, const DensityMatrix& rho2);

double infidelity(const DensityMatrix& rho1, const DensityMatrix& rho2);

/// log10 of infidelity, floored at 1e-16.
double log_infidelity(const DensityMatrix& rho1, const DensityMatrix& rho2);
double log_infidelity_of(double infid);

/// Hermitian principal square root. Eigenvalues in [-1e-10, 0) are clipped
/// to zero; anything below that throws NotPositive (the input was not a
/// valid PSD matrix).
ComplexMatrix sqrt_psd(const ComplexMatrix& hermitian);

}  // namespace qst
