#include "qst/povm.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <unsupported/Eigen/KroneckerProduct>

#include "qst/errors.hpp"

namespace qst {

namespace {

// Single-qubit eigenvectors, axis order z, y, x; outcome order +, -.
// Conventions: sigma_z diagonal with |0> its +1 eigenvector.
Eigen::Vector2cd pauli_eigvec(int axis, int outcome) {
  using C = std::complex<double>;
  const double s = 1.0 / std::sqrt(2.0);
  switch (axis) {
    case 0:  // z
      return outcome == 0 ? Eigen::Vector2cd(C(1, 0), C(0, 0))
                          : Eigen::Vector2cd(C(0, 0), C(1, 0));
    case 1:  // y
      return outcome == 0 ? Eigen::Vector2cd(C(s, 0), C(0, s))
                          : Eigen::Vector2cd(C(s, 0), C(0, -s));
    default:  // x
      return outcome == 0 ? Eigen::Vector2cd(C(s, 0), C(s, 0))
                          : Eigen::Vector2cd(C(s, 0), C(-s, 0));
  }
}

const char* axis_name(int axis) {
  return axis == 0 ? "z" : (axis == 1 ? "y" : "x");
}

}  // namespace

bool is_valid_detector(const Detector& det, double psd_tol,
                       double completeness_tol) {
  const Eigen::Index d = det.dim();
  if (d == 0) return false;
  ComplexMatrix sum = ComplexMatrix::Zero(d, d);
  for (const ComplexMatrix& el : det.elements) {
    if (el.rows() != d || el.cols() != d) return false;
    if (!el.allFinite()) return false;
    if ((el - el.adjoint()).cwiseAbs().maxCoeff() > psd_tol) return false;
    Eigen::SelfAdjointEigenSolver<ComplexMatrix> es(el,
                                                    Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() < -psd_tol) return false;
    sum += el;
  }
  return (sum - ComplexMatrix::Identity(d, d)).cwiseAbs().maxCoeff() <=
         completeness_tol;
}

MeasurementSet cube_measurement(int n_qubits) {
  if (n_qubits < 1 || n_qubits > 4) {
    throw UnsupportedSize("cube measurement supports 1..4 qubits, got " +
                          std::to_string(n_qubits));
  }
  const Eigen::Index d = Eigen::Index(1) << n_qubits;
  int n_axes_tuples = 1;
  for (int q = 0; q < n_qubits; ++q) n_axes_tuples *= 3;

  MeasurementSet ms;
  ms.n_qubits = n_qubits;
  ms.detectors.reserve(n_axes_tuples);
  for (int a = 0; a < n_axes_tuples; ++a) {
    // Decode the axis tuple most-significant-qubit-first so detector order
    // is lexicographic in (axis_0, axis_1, ...).
    std::vector<int> axes(n_qubits);
    int rem = a;
    for (int q = n_qubits - 1; q >= 0; --q) {
      axes[q] = rem % 3;
      rem /= 3;
    }
    Detector det;
    det.label.reserve(n_qubits);
    for (int q = 0; q < n_qubits; ++q) det.label += axis_name(axes[q]);
    det.elements.reserve(d);
    for (Eigen::Index o = 0; o < d; ++o) {
      Eigen::VectorXcd v = Eigen::VectorXcd::Ones(1);
      for (int q = 0; q < n_qubits; ++q) {
        const int outcome = int((o >> (n_qubits - 1 - q)) & 1);
        v = Eigen::kroneckerProduct(v, pauli_eigvec(axes[q], outcome))
                .eval();
      }
      det.elements.push_back(v * v.adjoint());
    }
    ms.detectors.push_back(std::move(det));
  }
  return ms;
}

Detector srm_detector(const std::vector<Eigen::VectorXcd>& states) {
  if (states.empty()) throw ShapeMismatch("srm_detector: no states");
  const Eigen::Index d = states.front().size();
  for (const auto& s : states) {
    if (s.size() != d) {
      throw DimensionMismatch("srm_detector: inconsistent state dims");
    }
  }
  ComplexMatrix gram = ComplexMatrix::Zero(d, d);
  for (const auto& s : states) gram += s * s.adjoint();
  gram = (gram + gram.adjoint()) / 2.0;
  Eigen::SelfAdjointEigenSolver<ComplexMatrix> es(gram);
  if (es.eigenvalues().minCoeff() <= 1e-8) {
    throw SingularGram("srm gram matrix min eigenvalue " +
                       std::to_string(es.eigenvalues().minCoeff()) +
                       " <= 1e-8; states do not span the space");
  }
  ComplexMatrix inv_sqrt =
      es.eigenvectors() *
      es.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() *
      es.eigenvectors().adjoint();
  Detector det;
  det.label = "srm";
  det.elements.reserve(states.size());
  for (const auto& s : states) {
    Eigen::VectorXcd w = inv_sqrt * s;
    det.elements.push_back(w * w.adjoint());
  }
  return det;
}

FrequencyTable born_probabilities(const DensityMatrix& rho,
                                  const MeasurementSet& ms) {
  const Eigen::Index d = rho.dim();
  if (ms.dim() != d) {
    throw DimensionMismatch("born_probabilities: state dim " +
                            std::to_string(d) + " vs detector dim " +
                            std::to_string(ms.dim()));
  }
  FrequencyTable table(ms.group_count(), d);
  for (Eigen::Index eta = 0; eta < ms.group_count(); ++eta) {
    const Detector& det = ms.detectors[size_t(eta)];
    if (Eigen::Index(det.elements.size()) != d) {
      throw DimensionMismatch("detector " + std::to_string(eta) + " has " +
                              std::to_string(det.elements.size()) +
                              " elements, expected " + std::to_string(d));
    }
    for (Eigen::Index gamma = 0; gamma < d; ++gamma) {
      const double p =
          (det.elements[size_t(gamma)].array() * rho.mat.transpose().array())
              .sum()
              .real();
      if (p < -1e-10 || p > 1.0 + 1e-10) {
        throw NotPositive("born probability " + std::to_string(p) +
                          " outside [0,1] at detector " +
                          std::to_string(eta) + " outcome " +
                          std::to_string(gamma));
      }
      table(eta, gamma) = std::clamp(p, 0.0, 1.0);
    }
  }
  return table;
}

FrequencyTable sample_frequencies(const FrequencyTable& probs,
                                  std::int64_t copies_per_detector,
                                  std::uint64_t rng_seed) {
  if (copies_per_detector == kInfiniteCopies) return probs;
  if (copies_per_detector < 1) {
    throw UsageError("copies per detector must be >= 1 or infinite");
  }
  Rng rng(rng_seed);
  FrequencyTable freqs(probs.rows(), probs.cols());
  std::vector<double> row(size_t(probs.cols()));
  for (Eigen::Index eta = 0; eta < probs.rows(); ++eta) {
    for (Eigen::Index g = 0; g < probs.cols(); ++g)
      row[size_t(g)] = probs(eta, g);
    std::vector<std::uint64_t> counts = multinomial_draw(
        static_cast<std::uint64_t>(copies_per_detector), row, rng);
    for (Eigen::Index g = 0; g < probs.cols(); ++g) {
      freqs(eta, g) =
          double(counts[size_t(g)]) / double(copies_per_detector);
    }
  }
  return freqs;
}

}  // namespace qst
