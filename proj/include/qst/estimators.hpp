#pragma once

#include <Eigen/Dense>
#include <vector>

#include "qst/povm.hpp"
#include "qst/qcore.hpp"

namespace qst {

/// Trace-orthonormal Hermitian basis of d x d matrices: B_0 = I/sqrt(d)
/// followed by the normalized generalized Gell-Mann set (symmetric and
/// antisymmetric off-diagonal pairs, then diagonal ladder matrices).
/// Tr(B_i B_j) = delta_ij; every Hermitian H = sum_i Re Tr(H B_i) B_i.
std::vector<ComplexMatrix> hermitian_basis(Eigen::Index d);

/// Real coordinates of a Hermitian matrix in hermitian_basis order.
Eigen::VectorXd hermitian_coordinates(const ComplexMatrix& h);

/// Least-squares design for a measurement set: row (eta, gamma) holds
/// Re Tr(O_{eta,gamma} B_i) for each basis element, so stacked Born
/// probabilities are A * x with x the basis coordinates of rho.
struct LreDesign {
  Eigen::MatrixXd a;  // (d_g * d) x d^2
  std::vector<ComplexMatrix> basis;
  Eigen::Index d = 0;
  Eigen::Index d_g = 0;
};

/// Builds the design and verifies informational completeness: smallest
/// singular value of A must exceed 1e-8 (RankDeficient otherwise).
LreDesign build_design(const MeasurementSet& ms);

/// Process-lifetime cache over build_design keyed by a content hash of the
/// operator matrices. Single writer, shared readers.
const LreDesign& cached_design(const MeasurementSet& ms);

/// Closest (Frobenius) unit-trace PSD matrix: symmetrize, eigendecompose,
/// project the spectrum onto the probability simplex by sorted
/// waterfilling, reassemble. diag(1.2, -0.2) maps to diag(1, 0).
DensityMatrix physical_projection(const ComplexMatrix& hermitian);

/// Linear regression estimation: solve min |A x - f|^2 with the trace
/// coordinate pinned to 1/sqrt(d), via normal equations with Tikhonov
/// lambda = 1e-12, then project the reconstruction to the physical set.
/// Throws RankDeficient if the measurement set is not informationally
/// complete at tolerance.
DensityMatrix lre_estimate(const FrequencyTable& f, const MeasurementSet& ms);

}  // namespace qst
