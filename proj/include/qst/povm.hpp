#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qst/qcore.hpp"
#include "qst/rng.hpp"

namespace qst {

/// One measurement: d operators (d x d, Hermitian PSD) summing to identity.
struct Detector {
  std::vector<ComplexMatrix> elements;
  std::string label;

  Eigen::Index dim() const {
    return elements.empty() ? 0 : elements.front().rows();
  }
};

struct MeasurementSet {
  std::vector<Detector> detectors;
  int n_qubits = 0;

  Eigen::Index dim() const {
    return detectors.empty() ? 0 : detectors.front().dim();
  }
  Eigen::Index group_count() const {
    return static_cast<Eigen::Index>(detectors.size());
  }
};

/// Row eta = outcome distribution of detector eta. Exact rows sum to 1
/// within 1e-12; sampled rows are count ratios n/N_t.
using FrequencyTable = Eigen::MatrixXd;

bool is_valid_detector(const Detector& det, double psd_tol = 1e-10,
                       double completeness_tol = 1e-9);

/// All 3^n projective Pauli product bases for n qubits. Detector order is
/// lexicographic in the per-qubit axis tuple with axis order (z, y, x);
/// element order is lexicographic in the per-qubit outcome tuple with
/// outcome order (+, -). Example n=2: detectors (z,z), (z,y), (z,x), (y,z),
/// ..., (x,x); elements of (z,z) are |00>, |01>, |10>, |11| projectors.
/// Throws UnsupportedSize unless 1 <= n_qubits <= 4.
MeasurementSet cube_measurement(int n_qubits);

/// Square-root measurement built from d pure states: with
/// Lambda = sum |psi><psi|, elements are Lambda^{-1/2}|psi><psi|Lambda^{-1/2}.
/// Throws SingularGram when Lambda's min eigenvalue <= 1e-8 (states do not
/// span the space); the caller resamples.
Detector srm_detector(const std::vector<Eigen::VectorXcd>& states);

/// Entry (eta, gamma) = Re Tr(O_etagamma rho), clipped to [0,1] after a
/// 1e-10 out-of-range check. Throws DimensionMismatch on dim mismatch,
/// NotPositive when an entry deviates from [0,1] past tolerance.
FrequencyTable born_probabilities(const DensityMatrix& rho,
                                  const MeasurementSet& ms);

inline constexpr std::int64_t kInfiniteCopies = -1;

/// Each row independently multinomial-sampled with copies_per_detector
/// trials, entries n_gamma / N_t; deterministic given seed. With
/// copies_per_detector == kInfiniteCopies the probabilities pass through
/// unchanged.
FrequencyTable sample_frequencies(const FrequencyTable& probs,
                                  std::int64_t copies_per_detector,
                                  std::uint64_t rng_seed);

}  // namespace qst
