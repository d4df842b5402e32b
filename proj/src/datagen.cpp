#include "qst/datagen.hpp"

#include <cmath>
#include <complex>
#include <thread>

#include "json.hpp"
#include "qst/errors.hpp"
#include "qst/io.hpp"

namespace qst {

using nlohmann::json;

std::string to_string(StateKind k) {
  return k == StateKind::pure ? "pure" : "mixed";
}

std::string to_string(MeasurementKind k) {
  return k == MeasurementKind::cube ? "cube" : "srm";
}

StateKind state_kind_from_string(const std::string& s) {
  if (s == "pure") return StateKind::pure;
  if (s == "mixed") return StateKind::mixed;
  throw ConfigError("unknown state kind: " + s);
}

MeasurementKind measurement_kind_from_string(const std::string& s) {
  if (s == "cube") return MeasurementKind::cube;
  if (s == "srm") return MeasurementKind::srm;
  throw ConfigError("unknown measurement kind: " + s);
}

ComplexMatrix haar_unitary(Eigen::Index dim, Rng& rng) {
  ComplexMatrix g(dim, dim);
  for (Eigen::Index i = 0; i < dim; ++i)
    for (Eigen::Index j = 0; j < dim; ++j) g(i, j) = rng.complex_normal();
  Eigen::HouseholderQR<ComplexMatrix> qr(g);
  ComplexMatrix q = qr.householderQ();
  ComplexMatrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  // Fold the R diagonal phases into Q; without this the QR convention
  // biases the distribution away from Haar.
  for (Eigen::Index j = 0; j < dim; ++j) {
    std::complex<double> rjj = r(j, j);
    double mag = std::abs(rjj);
    q.col(j) *= (mag > 0.0) ? rjj / mag : std::complex<double>(1.0, 0.0);
  }
  return q;
}

DensityMatrix haar_pure_state(Eigen::Index dim, Rng& rng) {
  ComplexMatrix u = haar_unitary(dim, rng);
  Eigen::VectorXcd psi = u.col(0);
  return DensityMatrix{psi * psi.adjoint()};
}

Eigen::VectorXcd haar_state_vector(Eigen::Index dim, Rng& rng) {
  Eigen::VectorXcd v(dim);
  for (Eigen::Index i = 0; i < dim; ++i) v(i) = rng.complex_normal();
  return v / v.norm();
}

DensityMatrix ginibre_mixed_state(Eigen::Index dim, Rng& rng) {
  ComplexMatrix g(dim, dim);
  for (Eigen::Index i = 0; i < dim; ++i)
    for (Eigen::Index j = 0; j < dim; ++j) g(i, j) = rng.complex_normal();
  ComplexMatrix prod = g * g.adjoint();
  double tr = prod.real().trace();
  prod *= std::complex<double>(1.0 / tr, 0.0);
  return DensityMatrix{(prod + prod.adjoint()) / 2.0};
}

namespace {

MeasurementSet build_measurement_set(const DatasetConfig& cfg,
                                     std::uint64_t seed) {
  if (cfg.measurement_kind == MeasurementKind::cube) {
    return cube_measurement(cfg.n_qubits);
  }
  if (cfg.srm_groups < 1) {
    throw ConfigError("srm needs at least one detector group");
  }
  const Eigen::Index d = Eigen::Index(1) << cfg.n_qubits;
  Rng rng(seed);
  MeasurementSet ms;
  ms.n_qubits = cfg.n_qubits;
  ms.detectors.reserve(size_t(cfg.srm_groups));
  for (int g = 0; g < cfg.srm_groups; ++g) {
    int attempts = 0;
    for (;;) {
      std::vector<Eigen::VectorXcd> states;
      states.reserve(size_t(d));
      for (Eigen::Index k = 0; k < d; ++k)
        states.push_back(haar_state_vector(d, rng));
      try {
        Detector det = srm_detector(states);
        det.label = "srm" + std::to_string(g);
        ms.detectors.push_back(std::move(det));
        break;
      } catch (const SingularGram&) {
        if (++attempts >= 10) throw;
      }
    }
  }
  return ms;
}

void fill_sample(const DatasetConfig& cfg, const MeasurementSet& ms,
                 std::uint64_t sample_seed, Dataset& ds, std::int64_t i) {
  const Eigen::Index d = ds.d;
  const Eigen::Index dg = ds.d_g;
  Rng rng(sample_seed);
  DensityMatrix rho = cfg.state_kind == StateKind::pure
                          ? haar_pure_state(d, rng)
                          : ginibre_mixed_state(d, rng);
  std::uint64_t freq_seed = rng.next_u64();

  RealVector alpha = rho_to_alpha(rho);
  FrequencyTable probs = born_probabilities(rho, ms);
  FrequencyTable freqs =
      sample_frequencies(probs, cfg.copies_per_detector, freq_seed);

  double* fdst = ds.freqs.data() + i * dg * d;
  for (Eigen::Index eta = 0; eta < dg; ++eta)
    for (Eigen::Index g = 0; g < d; ++g) *fdst++ = freqs(eta, g);
  double* adst = ds.alphas.data() + i * d * d;
  for (Eigen::Index k = 0; k < d * d; ++k) adst[k] = alpha(k);
  std::complex<double>* rdst = ds.rhos.data() + i * d * d;
  for (Eigen::Index r = 0; r < d; ++r)
    for (Eigen::Index c = 0; c < d; ++c) *rdst++ = rho.mat(r, c);
}

}  // namespace

Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                               Eigen::RowMajor>>
Dataset::freq_table(std::int64_t i) const {
  return {freqs.data() + i * d_g * d, d_g, d};
}

Eigen::Map<const Eigen::VectorXd> Dataset::alpha(std::int64_t i) const {
  return {alphas.data() + i * d * d, d * d};
}

DensityMatrix Dataset::rho(std::int64_t i) const {
  ComplexMatrix m(d, d);
  const std::complex<double>* src = rhos.data() + i * d * d;
  for (Eigen::Index r = 0; r < d; ++r)
    for (Eigen::Index c = 0; c < d; ++c) m(r, c) = *src++;
  return DensityMatrix{std::move(m)};
}

MeasurementSet Dataset::measurement_set() const {
  MeasurementSet ms;
  ms.n_qubits = config.n_qubits;
  ms.detectors.resize(size_t(d_g));
  const std::complex<double>* src = ops.data();
  for (Eigen::Index eta = 0; eta < d_g; ++eta) {
    Detector& det = ms.detectors[size_t(eta)];
    det.label = to_string(config.measurement_kind) + std::to_string(eta);
    det.elements.resize(size_t(d));
    for (Eigen::Index g = 0; g < d; ++g) {
      ComplexMatrix m(d, d);
      for (Eigen::Index r = 0; r < d; ++r)
        for (Eigen::Index c = 0; c < d; ++c) m(r, c) = *src++;
      det.elements[size_t(g)] = std::move(m);
    }
  }
  return ms;
}

Dataset build_dataset(const DatasetConfig& config) {
  if (config.n_samples < 1) throw ConfigError("n_samples must be >= 1");
  if (config.copies_per_detector != kInfiniteCopies &&
      config.copies_per_detector < 1) {
    throw ConfigError("copies_per_detector must be >= 1 or infinite (-1)");
  }

  Rng master(config.seed);
  const std::uint64_t ms_seed = master.next_u64();
  const std::uint64_t sample_base = master.next_u64();

  MeasurementSet ms = build_measurement_set(config, ms_seed);

  Dataset ds;
  ds.config = config;
  ds.d = ms.dim();
  ds.d_g = ms.group_count();
  ds.freqs.resize(size_t(config.n_samples * ds.d_g * ds.d));
  ds.alphas.resize(size_t(config.n_samples * ds.d * ds.d));
  ds.rhos.resize(size_t(config.n_samples * ds.d * ds.d));
  ds.ops.reserve(size_t(ds.d_g * ds.d * ds.d * ds.d));
  for (const Detector& det : ms.detectors) {
    for (const ComplexMatrix& el : det.elements) {
      for (Eigen::Index r = 0; r < ds.d; ++r)
        for (Eigen::Index c = 0; c < ds.d; ++c) ds.ops.push_back(el(r, c));
    }
  }

  const int jobs = std::max(1, config.jobs);
  if (jobs == 1) {
    for (std::int64_t i = 0; i < config.n_samples; ++i) {
      fill_sample(config, ms, sample_base + std::uint64_t(i), ds, i);
    }
  } else {
    std::vector<std::thread> workers;
    std::vector<std::exception_ptr> errors(static_cast<size_t>(jobs));
    for (int w = 0; w < jobs; ++w) {
      workers.emplace_back([&, w] {
        try {
          for (std::int64_t i = w; i < config.n_samples; i += jobs) {
            fill_sample(config, ms, sample_base + std::uint64_t(i), ds, i);
          }
        } catch (...) {
          errors[size_t(w)] = std::current_exception();
        }
      });
    }
    for (auto& t : workers) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<double> rhos_packed = io::interleave(ds.rhos);
  std::vector<double> ops_packed = io::interleave(ds.ops);
  io::write_f64(dir / "freqs.f64", ds.freqs);
  io::write_f64(dir / "alphas.f64", ds.alphas);
  io::write_f64(dir / "rhos.c128", rhos_packed);
  io::write_f64(dir / "ops.c128", ops_packed);

  json manifest{
      {"format_version", 1},
      {"n_qubits", ds.config.n_qubits},
      {"state_kind", to_string(ds.config.state_kind)},
      {"measurement_kind", to_string(ds.config.measurement_kind)},
      {"n_samples", ds.config.n_samples},
      {"d_G", ds.d_g},
      {"d", ds.d},
      {"copies_per_detector", ds.config.copies_per_detector},
      {"seed", ds.config.seed},
      {"checksums",
       {{"freqs.f64", io::crc64_hex(io::crc64(ds.freqs))},
        {"alphas.f64", io::crc64_hex(io::crc64(ds.alphas))},
        {"rhos.c128", io::crc64_hex(io::crc64(rhos_packed))},
        {"ops.c128", io::crc64_hex(io::crc64(ops_packed))}}},
  };
  io::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  json manifest;
  try {
    manifest = json::parse(io::read_text(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw FormatError("bad dataset manifest: " + std::string(e.what()));
  }
  if (!manifest.contains("format_version") ||
      manifest["format_version"] != 1) {
    throw FormatError("unsupported dataset format version");
  }

  Dataset ds;
  try {
    ds.config.n_qubits = manifest.at("n_qubits").get<int>();
    ds.config.state_kind =
        state_kind_from_string(manifest.at("state_kind").get<std::string>());
    ds.config.measurement_kind = measurement_kind_from_string(
        manifest.at("measurement_kind").get<std::string>());
    ds.config.n_samples = manifest.at("n_samples").get<std::int64_t>();
    ds.config.copies_per_detector =
        manifest.at("copies_per_detector").get<std::int64_t>();
    ds.config.seed = manifest.at("seed").get<std::uint64_t>();
    ds.d = manifest.at("d").get<Eigen::Index>();
    ds.d_g = manifest.at("d_G").get<Eigen::Index>();
  } catch (const json::exception& e) {
    throw FormatError("dataset manifest missing fields: " +
                      std::string(e.what()));
  }
  if (ds.config.measurement_kind == MeasurementKind::srm) {
    ds.config.srm_groups = int(ds.d_g);
  }
  if (ds.d != (Eigen::Index(1) << ds.config.n_qubits)) {
    throw ShapeMismatch("manifest d does not match 2^n_qubits");
  }

  auto read_checked = [&](const char* name,
                          std::size_t expected) -> std::vector<double> {
    std::vector<double> values = io::read_f64_raw(dir / name);
    const std::string want =
        manifest.at("checksums").at(name).get<std::string>();
    const std::string got = io::crc64_hex(io::crc64(values));
    if (got != want) {
      throw ChecksumError(std::string(name) + ": checksum " + got +
                          " does not match manifest " + want);
    }
    if (values.size() != expected) {
      throw ShapeMismatch(std::string(name) + ": manifest implies " +
                          std::to_string(expected) + " values, file holds " +
                          std::to_string(values.size()));
    }
    return values;
  };

  const auto n = size_t(ds.config.n_samples);
  ds.freqs = read_checked("freqs.f64", n * size_t(ds.d_g * ds.d));
  ds.alphas = read_checked("alphas.f64", n * size_t(ds.d * ds.d));
  ds.rhos = io::deinterleave(
      read_checked("rhos.c128", n * size_t(ds.d * ds.d) * 2));
  ds.ops = io::deinterleave(
      read_checked("ops.c128", size_t(ds.d_g * ds.d * ds.d * ds.d) * 2));
  return ds;
}

}  // namespace qst
