#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "qst/povm.hpp"
#include "qst/qcore.hpp"
#include "qst/rng.hpp"

namespace qst {

enum class StateKind { pure, mixed };
enum class MeasurementKind { cube, srm };

std::string to_string(StateKind k);
std::string to_string(MeasurementKind k);
StateKind state_kind_from_string(const std::string& s);
MeasurementKind measurement_kind_from_string(const std::string& s);

/// Haar-random unitary: QR of a complex Ginibre matrix with the R diagonal
/// phases folded into Q so the distribution is exactly Haar.
/// ||U U^dag - I||_max <= 1e-10 for all outputs.
ComplexMatrix haar_unitary(Eigen::Index dim, Rng& rng);

/// rho = U |0><0| U^dag with Haar U, i.e. the projector onto U's first
/// column. Rank 1, unit trace.
DensityMatrix haar_pure_state(Eigen::Index dim, Rng& rng);

/// Normalized vector of i.i.d. standard complex normals; Haar-distributed on
/// the unit sphere. Used to seed square-root measurements.
Eigen::VectorXcd haar_state_vector(Eigen::Index dim, Rng& rng);

/// rho = G G^dag / Tr(G G^dag) with G a dim x dim matrix of i.i.d. standard
/// complex normals (independent N(0,1) real and imaginary parts). Full rank
/// almost surely.
DensityMatrix ginibre_mixed_state(Eigen::Index dim, Rng& rng);

struct DatasetConfig {
  int n_qubits = 2;
  StateKind state_kind = StateKind::pure;
  MeasurementKind measurement_kind = MeasurementKind::cube;
  std::int64_t n_samples = 1000;
  /// kInfiniteCopies = exact probabilities.
  std::int64_t copies_per_detector = 10000;
  std::uint64_t seed = 0;
  /// Number of detectors for srm; ignored for cube (3^n implied).
  int srm_groups = 5;
  /// Worker threads for sample generation; outputs are identical for any
  /// value because every sample uses its own derived seed.
  int jobs = 1;
};

/// In-memory dataset. Arrays are flat row-major:
///   freqs  [n_samples][d_G][d]
///   alphas [n_samples][d^2]
///   rhos   [n_samples][d][d]
///   ops    [d_G][d][d][d]   (one MeasurementSet shared by all samples)
struct Dataset {
  DatasetConfig config;
  Eigen::Index d = 0;
  Eigen::Index d_g = 0;
  std::vector<double> freqs;
  std::vector<double> alphas;
  std::vector<std::complex<double>> rhos;
  std::vector<std::complex<double>> ops;

  std::int64_t n_samples() const { return config.n_samples; }

  /// Row-major views into one sample.
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                 Eigen::RowMajor>>
  freq_table(std::int64_t i) const;
  Eigen::Map<const Eigen::VectorXd> alpha(std::int64_t i) const;
  DensityMatrix rho(std::int64_t i) const;

  MeasurementSet measurement_set() const;
};

/// Deterministic generation: a master stream seeded with config.seed yields
/// one sub-seed for measurement construction and a base for per-sample
/// streams (sample i uses base + i), so results are independent of job
/// count. SRM detectors that draw a degenerate state set are resampled at
/// most 10 times before SingularGram propagates.
Dataset build_dataset(const DatasetConfig& config);

/// Directory layout: manifest.json plus freqs.f64, alphas.f64 (little-endian
/// float64, row-major) and rhos.c128, ops.c128 (little-endian float64
/// interleaved re, im). The manifest records shapes and a CRC-64 per file.
void save_dataset(const Dataset& ds, const std::filesystem::path& dir);

/// Verifies checksums before shapes: a corrupt or truncated array file is a
/// ChecksumError, a manifest/array disagreement a ShapeMismatch, a missing
/// or malformed manifest a FormatError.
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace qst
