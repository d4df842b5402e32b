#include "qst/estimators.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <unordered_map>

#include "qst/errors.hpp"
#include "qst/io.hpp"

namespace qst {

namespace {

constexpr double kRankTol = 1e-8;
constexpr double kTikhonov = 1e-12;

double real_trace_product(const ComplexMatrix& a, const ComplexMatrix& b) {
  // Tr(ab) = sum_{jk} a(j,k) b(k,j)
  return (a.array() * b.transpose().array()).sum().real();
}

}  // namespace

std::vector<ComplexMatrix> hermitian_basis(Eigen::Index d) {
  if (d < 1) throw DimensionMismatch("hermitian_basis: dimension < 1");
  std::vector<ComplexMatrix> basis;
  basis.reserve(std::size_t(d * d));
  const double inv_sqrt_d = 1.0 / std::sqrt(double(d));
  basis.push_back(ComplexMatrix::Identity(d, d) * inv_sqrt_d);

  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  const std::complex<double> im(0.0, 1.0);
  for (Eigen::Index j = 0; j < d; ++j) {
    for (Eigen::Index k = j + 1; k < d; ++k) {
      ComplexMatrix sym = ComplexMatrix::Zero(d, d);
      sym(j, k) = inv_sqrt2;
      sym(k, j) = inv_sqrt2;
      basis.push_back(sym);
      ComplexMatrix asym = ComplexMatrix::Zero(d, d);
      asym(j, k) = -im * inv_sqrt2;
      asym(k, j) = im * inv_sqrt2;
      basis.push_back(asym);
    }
  }
  for (Eigen::Index l = 1; l < d; ++l) {
    ComplexMatrix diag = ComplexMatrix::Zero(d, d);
    const double norm = 1.0 / std::sqrt(double(l * (l + 1)));
    for (Eigen::Index m = 0; m < l; ++m) diag(m, m) = norm;
    diag(l, l) = -double(l) * norm;
    basis.push_back(diag);
  }
  return basis;
}

Eigen::VectorXd hermitian_coordinates(const ComplexMatrix& h) {
  if (h.rows() != h.cols()) {
    throw DimensionMismatch("hermitian_coordinates: matrix not square");
  }
  const std::vector<ComplexMatrix> basis = hermitian_basis(h.rows());
  Eigen::VectorXd x(Eigen::Index(basis.size()));
  for (std::size_t i = 0; i < basis.size(); ++i) {
    x(Eigen::Index(i)) = real_trace_product(h, basis[i]);
  }
  return x;
}

LreDesign build_design(const MeasurementSet& ms) {
  const Eigen::Index d = ms.dim();
  const Eigen::Index d_g = ms.group_count();
  LreDesign design;
  design.d = d;
  design.d_g = d_g;
  design.basis = hermitian_basis(d);
  const Eigen::Index d2 = d * d;
  design.a.resize(d_g * d, d2);
  for (Eigen::Index eta = 0; eta < d_g; ++eta) {
    const Detector& det = ms.detectors[std::size_t(eta)];
    if (Eigen::Index(det.elements.size()) != d) {
      throw DimensionMismatch("build_design: detector " + det.label +
                              " has " + std::to_string(det.elements.size()) +
                              " outcomes, expected " + std::to_string(d));
    }
    for (Eigen::Index gamma = 0; gamma < d; ++gamma) {
      const ComplexMatrix& op = det.elements[std::size_t(gamma)];
      for (Eigen::Index i = 0; i < d2; ++i) {
        design.a(eta * d + gamma, i) =
            real_trace_product(op, design.basis[std::size_t(i)]);
      }
    }
  }
  if (design.a.rows() < d2) {
    throw RankDeficient("measurement set has " +
                        std::to_string(design.a.rows()) +
                        " outcome rows but the state space needs " +
                        std::to_string(d2));
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(design.a);
  const double sigma_min =
      svd.singularValues()(svd.singularValues().size() - 1);
  if (sigma_min <= kRankTol) {
    throw RankDeficient("measurement set not informationally complete "
                        "(smallest design singular value " +
                        std::to_string(sigma_min) + ")");
  }
  return design;
}

namespace {

std::uint64_t measurement_hash(const MeasurementSet& ms) {
  std::vector<double> bytes;
  for (const Detector& det : ms.detectors) {
    for (const ComplexMatrix& op : det.elements) {
      for (Eigen::Index r = 0; r < op.rows(); ++r) {
        for (Eigen::Index c = 0; c < op.cols(); ++c) {
          bytes.push_back(op(r, c).real());
          bytes.push_back(op(r, c).imag());
        }
      }
    }
  }
  return io::crc64(bytes);
}

}  // namespace

const LreDesign& cached_design(const MeasurementSet& ms) {
  static std::unordered_map<std::uint64_t, std::unique_ptr<LreDesign>> cache;
  static std::shared_mutex mutex;
  const std::uint64_t key = measurement_hash(ms);
  {
    std::shared_lock lock(mutex);
    auto it = cache.find(key);
    if (it != cache.end()) return *it->second;
  }
  auto built = std::make_unique<LreDesign>(build_design(ms));
  std::unique_lock lock(mutex);
  auto [it, inserted] = cache.emplace(key, std::move(built));
  return *it->second;
}

DensityMatrix physical_projection(const ComplexMatrix& hermitian) {
  if (hermitian.rows() != hermitian.cols()) {
    throw DimensionMismatch("physical_projection: matrix not square");
  }
  const Eigen::Index d = hermitian.rows();
  ComplexMatrix sym = 0.5 * (hermitian + hermitian.adjoint());
  Eigen::SelfAdjointEigenSolver<ComplexMatrix> es(sym);
  Eigen::VectorXd lambda = es.eigenvalues();  // ascending

  // Sorted-waterfilling projection of the spectrum onto the simplex.
  std::vector<double> desc(lambda.data(), lambda.data() + d);
  std::sort(desc.begin(), desc.end(), std::greater<double>());
  double cumsum = 0.0, mu = 0.0;
  for (Eigen::Index k = 0; k < d; ++k) {
    cumsum += desc[std::size_t(k)];
    const double candidate = (cumsum - 1.0) / double(k + 1);
    if (desc[std::size_t(k)] - candidate > 0.0) mu = candidate;
  }
  Eigen::VectorXd clipped(d);
  for (Eigen::Index i = 0; i < d; ++i) {
    clipped(i) = std::max(lambda(i) - mu, 0.0);
  }

  ComplexMatrix rho = es.eigenvectors() * clipped.asDiagonal() *
                      es.eigenvectors().adjoint();
  rho = 0.5 * (rho + rho.adjoint());
  // The simplex projection fixes the trace to 1 up to rounding; renormalize
  // so downstream invariant checks see it exactly.
  rho /= rho.trace().real();
  return DensityMatrix{std::move(rho)};
}

DensityMatrix lre_estimate(const FrequencyTable& f, const MeasurementSet& ms) {
  const LreDesign& design = cached_design(ms);
  const Eigen::Index d = design.d, d_g = design.d_g;
  if (f.rows() != d_g || f.cols() != d) {
    throw DimensionMismatch("lre_estimate: frequency table is " +
                            std::to_string(f.rows()) + "x" +
                            std::to_string(f.cols()) + ", design wants " +
                            std::to_string(d_g) + "x" + std::to_string(d));
  }
  Eigen::VectorXd y(d_g * d);
  for (Eigen::Index eta = 0; eta < d_g; ++eta) {
    for (Eigen::Index gamma = 0; gamma < d; ++gamma) {
      y(eta * d + gamma) = f(eta, gamma);
    }
  }

  const Eigen::Index d2 = d * d;
  const double x0 = 1.0 / std::sqrt(double(d));
  ComplexMatrix h = design.basis[0] * x0;
  if (d2 > 1) {
    Eigen::MatrixXd rest = design.a.rightCols(d2 - 1);
    Eigen::VectorXd rhs = rest.transpose() * (y - design.a.col(0) * x0);
    Eigen::MatrixXd gram = rest.transpose() * rest;
    gram.diagonal().array() += kTikhonov;
    Eigen::VectorXd x = gram.ldlt().solve(rhs);
    for (Eigen::Index i = 0; i < d2 - 1; ++i) {
      h += design.basis[std::size_t(i + 1)] * x(i);
    }
  }
  return physical_projection(h);
}

}  // namespace qst
