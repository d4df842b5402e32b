#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "qst/datagen.hpp"
#include "qst/errors.hpp"
#include "qst/estimators.hpp"
#include "qst/gradcheck.hpp"
#include "qst/io.hpp"
#include "qst/model.hpp"
#include "qst/optim.hpp"
#include "qst/train.hpp"

using json = nlohmann::json;
namespace fs = std::filesystem;
using namespace qst;

namespace {

constexpr int kGradcheckFailedExit = 16;

// Settings resolve defaults <- config file <- command-line flags. The
// merger tracks accepted keys so a typo in the file is an error rather
// than a silent no-op.
struct ConfigMerger {
  json cfg = json::object();
  std::set<std::string> known{"command"};

  void load(const std::string& path) {
    if (path.empty()) return;
    json parsed;
    try {
      parsed = json::parse(io::read_text(path));
    } catch (const json::exception& e) {
      throw FormatError("config file " + path + ": " + e.what());
    }
    if (!parsed.is_object()) {
      throw FormatError("config file " + path + " must hold a JSON object");
    }
    cfg = std::move(parsed);
  }

  template <typename T>
  void field(CLI::Option* opt, const char* key, T& var) {
    known.insert(key);
    if (opt != nullptr && opt->count() > 0) return;
    if (!cfg.contains(key)) return;
    try {
      var = cfg.at(key).get<T>();
    } catch (const json::exception&) {
      throw FormatError(std::string("config key '") + key +
                        "' has the wrong type");
    }
  }

  // Copy budgets may be numbers or the string "inf".
  void copies_field(CLI::Option* opt, const char* key, std::string& var) {
    known.insert(key);
    if (opt != nullptr && opt->count() > 0) return;
    if (!cfg.contains(key)) return;
    const json& v = cfg.at(key);
    if (v.is_number_integer()) {
      var = std::to_string(v.get<std::int64_t>());
    } else if (v.is_string()) {
      var = v.get<std::string>();
    } else {
      throw FormatError(std::string("config key '") + key +
                        "' must be an integer or \"inf\"");
    }
  }

  void copies_list_field(CLI::Option* opt, const char* key,
                         std::vector<std::string>& var) {
    known.insert(key);
    if (opt != nullptr && opt->count() > 0) return;
    if (!cfg.contains(key)) return;
    const json& v = cfg.at(key);
    if (!v.is_array()) {
      throw FormatError(std::string("config key '") + key +
                        "' must be an array");
    }
    var.clear();
    for (const json& e : v) {
      if (e.is_number_integer()) {
        var.push_back(std::to_string(e.get<std::int64_t>()));
      } else if (e.is_string()) {
        var.push_back(e.get<std::string>());
      } else {
        throw FormatError(std::string("config key '") + key +
                          "' entries must be integers or \"inf\"");
      }
    }
  }

  bool has(const char* key) const { return cfg.contains(key); }

  void finish() const {
    for (const auto& item : cfg.items()) {
      if (!known.count(item.key())) {
        throw UsageError("config file key '" + item.key() +
                         "' is not accepted by this command");
      }
    }
  }
};

std::int64_t parse_copies(const std::string& s) {
  if (s == "inf") return kInfiniteCopies;
  try {
    std::size_t pos = 0;
    const std::int64_t v = std::stoll(s, &pos);
    if (pos != s.size() || v <= 0) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw UsageError("--copies must be a positive integer or 'inf', got '" +
                     s + "'");
  }
}

// Refuses to clobber completed output. When resume_marker is set (sweep
// style commands) only a directory containing that finished marker blocks;
// a partial directory resumes.
fs::path prepare_out(const std::string& out, bool force,
                     const char* resume_marker = nullptr) {
  if (out.empty()) throw UsageError("--out is required");
  fs::path dir(out);
  if (fs::exists(dir) && !fs::is_empty(dir) && !force) {
    if (resume_marker == nullptr || fs::exists(dir / resume_marker)) {
      throw UsageError("output directory '" + out +
                       "' already has contents; pass --force to overwrite");
    }
  }
  fs::create_directories(dir);
  return dir;
}

void write_resolved(const fs::path& dir, json j) {
  io::write_text(dir / "resolved_config.json", j.dump(2) + "\n");
}

json metrics_json(const EvalMetrics& m, Eigen::Index n_samples) {
  json j;
  j["n_samples"] = n_samples;
  j["mean_fidelity"] = m.mean_fidelity;
  j["min_fidelity"] = m.min_fidelity;
  j["max_fidelity"] = m.max_fidelity;
  j["variance_fidelity"] = m.variance_fidelity;
  j["mean_infidelity"] = m.mean_infidelity;
  j["mean_log_infidelity"] = m.mean_log_infidelity;
  j["failed_samples"] = m.failed_samples;
  return j;
}

std::string normalize_model(std::string s) {
  std::replace(s.begin(), s.end(), '-', '_');
  return s;
}

// Shared flags for every command that trains models.
struct TrainFlags {
  std::string data;
  std::string eval_data;
  std::string model = "qat";
  double beta = 0.09;
  std::int64_t epochs = 500;
  std::int64_t batch = 256;
  double lr = 0.005;
  std::int64_t warmup = 20;
  std::string lr_kind = "cosine";
  std::uint64_t seed = 0;
  std::int64_t eval_every = 5;
  std::int64_t d_l = 8;
  std::int64_t d_s = 32;
  std::int64_t d_h = 16;
  std::int64_t d_rate = 8;
  double holdout = 0.1;
  std::int64_t jobs = 1;

  CLI::Option* lr_opt = nullptr;
  CLI::Option* opts[16] = {};

  void add(CLI::App* cmd, bool with_data = true) {
    if (with_data) {
      opts[0] = cmd->add_option("--data", data, "dataset directory");
      opts[1] = cmd->add_option("--eval-data", eval_data,
                                "separate eval dataset (default: holdout)");
    }
    opts[2] = cmd->add_option("--model", model, "qat | qat-no-oe | fcn")
                  ->check(CLI::IsMember({"qat", "qat-no-oe", "qat_no_oe",
                                         "fcn"}));
    opts[3] = cmd->add_option("--beta", beta, "integrated loss weight");
    opts[4] = cmd->add_option("--epochs", epochs, "training epochs");
    opts[5] = cmd->add_option("--batch", batch, "batch size");
    lr_opt = cmd->add_option("--lr", lr,
                             "base learning rate (default 0.005 qat, "
                             "0.0001 fcn)");
    opts[6] = cmd->add_option("--warmup", warmup, "warmup epochs");
    opts[7] = cmd->add_option("--lr-kind", lr_kind, "cosine | step")
                  ->check(CLI::IsMember({"cosine", "step"}));
    opts[8] = cmd->add_option("--seed", seed, "master seed");
    opts[9] = cmd->add_option("--eval-every", eval_every,
                              "epochs between evaluations");
    opts[10] = cmd->add_option("--d-l", d_l, "transformer layers");
    opts[11] = cmd->add_option("--d-s", d_s, "latent width");
    opts[12] = cmd->add_option("--d-h", d_h, "attention head width");
    opts[13] = cmd->add_option("--d-rate", d_rate, "MLP expansion factor");
    opts[14] = cmd->add_option("--holdout", holdout,
                               "trailing eval fraction when no --eval-data");
    opts[15] = cmd->add_option("--jobs", jobs, "evaluation worker threads");
  }

  void merge(ConfigMerger& m, bool with_data = true) {
    if (with_data) {
      m.field(opts[0], "data", data);
      m.field(opts[1], "eval_data", eval_data);
    }
    m.field(opts[2], "model", model);
    m.field(opts[3], "beta", beta);
    m.field(opts[4], "epochs", epochs);
    m.field(opts[5], "batch", batch);
    m.field(lr_opt, "lr", lr);
    m.field(opts[6], "warmup", warmup);
    m.field(opts[7], "lr_kind", lr_kind);
    m.field(opts[8], "seed", seed);
    m.field(opts[9], "eval_every", eval_every);
    m.field(opts[10], "d_l", d_l);
    m.field(opts[11], "d_s", d_s);
    m.field(opts[12], "d_h", d_h);
    m.field(opts[13], "d_rate", d_rate);
    m.field(opts[14], "holdout", holdout);
    m.field(opts[15], "jobs", jobs);
    // The FCN's default learning rate differs; an explicit flag or config
    // value always wins.
    if (normalize_model(model) == "fcn" && lr_opt->count() == 0 &&
        !m.has("lr")) {
      lr = 0.0001;
    }
    // Only the default warmup follows a shortened run down; explicit
    // values still hit the 0 <= warmup <= epochs validation.
    if (opts[6]->count() == 0 && !m.has("warmup") && warmup > epochs) {
      warmup = epochs;
    }
  }

  TrainConfig to_config() const {
    TrainConfig tc;
    tc.data_dir = data;
    tc.eval_data_dir = eval_data;
    tc.model_kind = model_kind_from_string(normalize_model(model));
    tc.beta = beta;
    tc.batch_size = batch;
    tc.base_lr = lr;
    tc.epochs = epochs;
    tc.warmup_epochs = warmup;
    tc.lr_kind = ad::schedule_kind_from_string(lr_kind);
    tc.seed = seed;
    tc.eval_every = eval_every;
    tc.d_s = d_s;
    tc.d_l = d_l;
    tc.d_h = d_h;
    tc.d_rate = d_rate;
    tc.holdout_fraction = holdout;
    tc.jobs = jobs;
    return tc;
  }

  json to_json() const {
    json j;
    j["data"] = data;
    j["eval_data"] = eval_data;
    j["model"] = normalize_model(model);
    j["beta"] = beta;
    j["epochs"] = epochs;
    j["batch"] = batch;
    j["lr"] = lr;
    j["warmup"] = warmup;
    j["lr_kind"] = lr_kind;
    j["seed"] = seed;
    j["eval_every"] = eval_every;
    j["d_l"] = d_l;
    j["d_s"] = d_s;
    j["d_h"] = d_h;
    j["d_rate"] = d_rate;
    j["holdout"] = holdout;
    j["jobs"] = jobs;
    return j;
  }
};

DataView holdout_view(const Dataset& ds, double holdout) {
  if (!(holdout >= 0.0 && holdout < 1.0)) {
    throw UsageError("--holdout must lie in [0,1)");
  }
  const Eigen::Index n = ds.n_samples();
  if (holdout == 0.0) return DataView{&ds, 0, n};
  const Eigen::Index n_eval = std::min<Eigen::Index>(
      n - 1, Eigen::Index(std::llround(double(n) * holdout)));
  if (n_eval <= 0) return DataView{&ds, 0, n};
  return DataView{&ds, n - n_eval, n};
}

// --- generate ---------------------------------------------------------

struct GenerateCmd {
  int qubits = 2;
  std::string kind = "pure";
  std::string measurement = "cube";
  int srm_detectors = 5;
  std::int64_t samples = 1000;
  std::string copies = "10000";
  std::uint64_t seed = 0;
  std::int64_t jobs = 1;
  std::string out;
  bool force = false;
  std::string config;
  CLI::Option* o[9] = {};

  void add(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand(
        "generate", "build a simulated measurement dataset");
    o[0] = cmd->add_option("--qubits", qubits, "system size")
               ->check(CLI::Range(1, 4));
    o[1] = cmd->add_option("--kind", kind, "pure | mixed")
               ->check(CLI::IsMember({"pure", "mixed"}));
    o[2] = cmd->add_option("--measurement", measurement, "cube | srm")
               ->check(CLI::IsMember({"cube", "srm"}));
    o[3] = cmd->add_option("--srm-detectors", srm_detectors,
                           "detector count for srm");
    o[4] = cmd->add_option("--samples", samples, "number of states");
    o[5] = cmd->add_option("--copies", copies,
                           "copies per detector, or 'inf' for exact "
                           "probabilities");
    o[6] = cmd->add_option("--seed", seed, "master seed");
    o[7] = cmd->add_option("--jobs", jobs, "generation worker threads");
    o[8] = cmd->add_option("--out", out, "output directory");
    cmd->add_flag("--force", force, "overwrite existing output");
    cmd->add_option("--config", config, "JSON config file");
  }

  int run() {
    ConfigMerger m;
    m.load(config);
    m.field(o[0], "qubits", qubits);
    m.field(o[1], "kind", kind);
    m.field(o[2], "measurement", measurement);
    m.field(o[3], "srm_detectors", srm_detectors);
    m.field(o[4], "samples", samples);
    m.copies_field(o[5], "copies", copies);
    m.field(o[6], "seed", seed);
    m.field(o[7], "jobs", jobs);
    m.field(o[8], "out", out);
    m.finish();

    DatasetConfig dc;
    dc.n_qubits = qubits;
    dc.state_kind = state_kind_from_string(kind);
    dc.measurement_kind = measurement_kind_from_string(measurement);
    dc.srm_groups = srm_detectors;
    dc.n_samples = samples;
    dc.copies_per_detector = parse_copies(copies);
    dc.seed = seed;
    dc.jobs = int(jobs);

    fs::path dir = prepare_out(out, force);
    json rc;
    rc["command"] = "generate";
    rc["qubits"] = qubits;
    rc["kind"] = kind;
    rc["measurement"] = measurement;
    rc["srm_detectors"] = srm_detectors;
    rc["samples"] = samples;
    rc["copies"] = copies;
    rc["seed"] = seed;
    rc["jobs"] = jobs;
    rc["out"] = out;
    write_resolved(dir, rc);

    Dataset ds = build_dataset(dc);
    save_dataset(ds, dir);
    std::cout << "wrote " << ds.n_samples() << " samples (d=" << ds.d
              << ", detectors=" << ds.d_g << ") to " << out << "\n";
    return 0;
  }
};

// --- train ------------------------------------------------------------

struct TrainCmd {
  TrainFlags flags;
  std::string out;
  bool force = false;
  std::string config;
  CLI::Option* out_opt = nullptr;

  void add(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("train", "train a reconstructor");
    flags.add(cmd);
    out_opt = cmd->add_option("--out", out, "output directory");
    cmd->add_flag("--force", force, "overwrite existing output");
    cmd->add_option("--config", config, "JSON config file");
  }

  int run() {
    ConfigMerger m;
    m.load(config);
    flags.merge(m);
    m.field(out_opt, "out", out);
    m.finish();
    if (flags.data.empty()) throw UsageError("--data is required");

    fs::path dir = prepare_out(out, force);
    json rc = flags.to_json();
    rc["command"] = "train";
    rc["out"] = out;
    write_resolved(dir, rc);

    TrainConfig tc = flags.to_config();
    tc.out_dir = dir;
    TrainReport report = train(tc);
    std::cout << "best epoch " << report.best_epoch << " eval infidelity "
              << report.best_eval_infidelity << "\n";
    std::cout << "final mean infidelity "
              << report.final_metrics.mean_infidelity << " over "
              << report.records.size() << " epochs\n";
    return 0;
  }
};

// --- eval -------------------------------------------------------------

FrequencyTable load_external_freqs(const fs::path& path) {
  const std::string text = io::read_text(path);
  std::istringstream in(text);
  std::string line;
  auto next_line = [&in, &line]() {
    if (!std::getline(in, line)) return false;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
  };
  if (!next_line() || line != "detector,outcome,frequency") {
    throw FormatError("frequency CSV must start with header "
                      "'detector,outcome,frequency'");
  }
  struct Entry {
    Eigen::Index det, out;
    double freq;
  };
  std::vector<Entry> entries;
  Eigen::Index max_det = -1, max_out = -1;
  std::size_t line_no = 1;
  while (next_line()) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string a, b, c;
    if (!std::getline(row, a, ',') || !std::getline(row, b, ',') ||
        !std::getline(row, c)) {
      throw FormatError("frequency CSV line " + std::to_string(line_no) +
                        ": expected detector,outcome,frequency");
    }
    try {
      Entry e{Eigen::Index(std::stoll(a)), Eigen::Index(std::stoll(b)),
              std::stod(c)};
      if (e.det < 0 || e.out < 0 || !(e.freq >= 0.0)) {
        throw std::invalid_argument("negative");
      }
      max_det = std::max(max_det, e.det);
      max_out = std::max(max_out, e.out);
      entries.push_back(e);
    } catch (const std::exception&) {
      throw FormatError("frequency CSV line " + std::to_string(line_no) +
                        ": bad values '" + line + "'");
    }
  }
  if (entries.empty()) throw FormatError("frequency CSV has no data rows");
  const Eigen::Index d_g = max_det + 1, d = max_out + 1;
  FrequencyTable table = FrequencyTable::Constant(
      d_g, d, std::numeric_limits<double>::quiet_NaN());
  for (const Entry& e : entries) {
    if (!std::isnan(table(e.det, e.out))) {
      throw FormatError("frequency CSV repeats detector " +
                        std::to_string(e.det) + " outcome " +
                        std::to_string(e.out));
    }
    table(e.det, e.out) = e.freq;
  }
  if (table.hasNaN()) {
    throw FormatError("frequency CSV is missing detector/outcome pairs: "
                      "expected the full " +
                      std::to_string(d_g) + "x" + std::to_string(d) +
                      " grid");
  }
  return table;
}

MeasurementSet load_external_ops(const fs::path& path, Eigen::Index d_g,
                                 Eigen::Index d) {
  const std::vector<double> packed = io::read_f64_raw(path);
  const std::vector<std::complex<double>> flat = io::deinterleave(packed);
  const Eigen::Index want = d_g * d * d * d;
  if (Eigen::Index(flat.size()) != want) {
    throw ShapeMismatch("ops file holds " + std::to_string(flat.size()) +
                        " operators entries, frequencies imply " +
                        std::to_string(want));
  }
  MeasurementSet ms;
  ms.n_qubits = int(std::llround(std::log2(double(d))));
  for (Eigen::Index g = 0; g < d_g; ++g) {
    Detector det;
    det.label = "ext" + std::to_string(g);
    for (Eigen::Index j = 0; j < d; ++j) {
      ComplexMatrix mat(d, d);
      for (Eigen::Index r = 0; r < d; ++r) {
        for (Eigen::Index c = 0; c < d; ++c) {
          mat(r, c) = flat[std::size_t(((g * d + j) * d + r) * d + c)];
        }
      }
      det.elements.push_back(mat);
    }
    if (!is_valid_detector(det)) {
      throw NotPositive("ops file detector " + std::to_string(g) +
                        " fails PSD/completeness validation");
    }
    ms.detectors.push_back(std::move(det));
  }
  return ms;
}

struct EvalCmd {
  std::string checkpoint;
  std::string data;
  std::string freqs;
  std::string ops;
  double holdout = 0.0;
  std::int64_t jobs = 1;
  std::string out;
  bool force = false;
  std::string config;
  CLI::Option* o[7] = {};

  void add(CLI::App& app) {
    CLI::App* cmd =
        app.add_subcommand("eval", "evaluate a checkpoint on data");
    o[0] = cmd->add_option("--checkpoint", checkpoint,
                           "checkpoint directory");
    o[1] = cmd->add_option("--data", data, "dataset directory");
    o[2] = cmd->add_option("--freqs", freqs,
                           "external frequency CSV (detector,outcome,"
                           "frequency)");
    o[3] = cmd->add_option("--ops", ops,
                           "operators file matching the frequency CSV");
    o[4] = cmd->add_option("--holdout", holdout,
                           "evaluate only the trailing fraction");
    o[5] = cmd->add_option("--jobs", jobs, "worker threads");
    o[6] = cmd->add_option("--out", out, "output directory");
    cmd->add_flag("--force", force, "overwrite existing output");
    cmd->add_option("--config", config, "JSON config file");
  }

  int run() {
    ConfigMerger m;
    m.load(config);
    m.field(o[0], "checkpoint", checkpoint);
    m.field(o[1], "data", data);
    m.field(o[2], "freqs", freqs);
    m.field(o[3], "ops", ops);
    m.field(o[4], "holdout", holdout);
    m.field(o[5], "jobs", jobs);
    m.field(o[6], "out", out);
    m.finish();

    if (checkpoint.empty()) throw UsageError("--checkpoint is required");
    const bool have_data = !data.empty();
    const bool have_ext = !freqs.empty() || !ops.empty();
    if (have_data == have_ext) {
      throw UsageError(
          "pass either --data DIR or both --freqs FILE and --ops FILE");
    }
    if (have_ext && (freqs.empty() || ops.empty())) {
      throw UsageError("--freqs and --ops must be given together");
    }

    fs::path dir = prepare_out(out, force);
    json rc;
    rc["command"] = "eval";
    rc["checkpoint"] = checkpoint;
    rc["data"] = data;
    rc["freqs"] = freqs;
    rc["ops"] = ops;
    rc["holdout"] = holdout;
    rc["jobs"] = jobs;
    rc["out"] = out;
    write_resolved(dir, rc);

    if (have_data) {
      Dataset ds = load_dataset(data);
      DataView view = holdout_view(ds, holdout);
      EvalMetrics metrics = evaluate_checkpoint(checkpoint, view, jobs);
      io::write_text(dir / "metrics.json",
                     metrics_json(metrics, view.size()).dump(2) + "\n");
      std::cout << "mean infidelity " << metrics.mean_infidelity << " over "
                << view.size() << " samples (" << metrics.failed_samples
                << " failed)\n";
      return 0;
    }

    FrequencyTable table = load_external_freqs(freqs);
    MeasurementSet ms = load_external_ops(ops, table.rows(), table.cols());
    ad::Checkpoint ckpt = ad::load_checkpoint(checkpoint);
    if (ckpt.config_json.empty()) {
      throw FormatError("checkpoint has no embedded model config");
    }
    QstModel model = model_from_config_json(ckpt.config_json);
    ad::restore_parameters(ckpt, model.params);
    if (model.config.d != ms.dim() ||
        model.config.d_g != ms.group_count()) {
      throw DimensionMismatch(
          "checkpoint expects (" + std::to_string(model.config.d_g) + "," +
          std::to_string(model.config.d) + "), external data has (" +
          std::to_string(ms.group_count()) + "," +
          std::to_string(ms.dim()) + ")");
    }
    Eigen::VectorXd alpha = predict_alpha(model, table, operator_rows(ms));
    DensityMatrix est = alpha_to_rho(alpha);

    std::vector<std::complex<double>> flat(
        est.mat.data(), est.mat.data() + est.mat.size());
    // Eigen stores column-major; persist row-major for readability.
    std::vector<std::complex<double>> row_major;
    for (Eigen::Index r = 0; r < est.mat.rows(); ++r) {
      for (Eigen::Index c = 0; c < est.mat.cols(); ++c) {
        row_major.push_back(est.mat(r, c));
      }
    }
    io::write_f64(dir / "predicted_state.c128", io::interleave(row_major));
    std::vector<double> alpha_out(alpha.data(), alpha.data() + alpha.size());
    io::write_f64(dir / "predicted_alpha.f64", alpha_out);

    Eigen::SelfAdjointEigenSolver<ComplexMatrix> es(est.mat);
    json summary;
    summary["dimension"] = est.mat.rows();
    summary["trace"] = est.mat.trace().real();
    summary["purity"] = (est.mat * est.mat).trace().real();
    summary["min_eigenvalue"] = es.eigenvalues().minCoeff();
    io::write_text(dir / "metrics.json", summary.dump(2) + "\n");
    std::cout << "reconstructed one state (d=" << est.mat.rows()
              << ", purity " << summary["purity"].get<double>() << ")\n";
    return 0;
  }
};

// --- lre --------------------------------------------------------------

struct LreCmd {
  std::string data;
  double holdout = 0.0;
  std::int64_t jobs = 1;
  std::string out;
  bool force = false;
  std::string config;
  CLI::Option* o[4] = {};

  void add(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand(
        "lre", "linear regression baseline over a dataset");
    o[0] = cmd->add_option("--data", data, "dataset directory");
    o[1] = cmd->add_option("--holdout", holdout,
                           "evaluate only the trailing fraction");
    o[2] = cmd->add_option("--jobs", jobs, "worker threads");
    o[3] = cmd->add_option("--out", out, "output directory");
    cmd->add_flag("--force", force, "overwrite existing output");
    cmd->add_option("--config", config, "JSON config file");
  }

  int run() {
    ConfigMerger m;
    m.load(config);
    m.field(o[0], "data", data);
    m.field(o[1], "holdout", holdout);
    m.field(o[2], "jobs", jobs);
    m.field(o[3], "out", out);
    m.finish();
    if (data.empty()) throw UsageError("--data is required");

    fs::path dir = prepare_out(out, force);
    json rc;
    rc["command"] = "lre";
    rc["data"] = data;
    rc["holdout"] = holdout;
    rc["jobs"] = jobs;
    rc["out"] = out;
    write_resolved(dir, rc);

    Dataset ds = load_dataset(data);
    DataView view = holdout_view(ds, holdout);
    const MeasurementSet ms = ds.measurement_set();
    const Eigen::Index n = view.size();
    std::vector<double> fid(std::size_t(n), 0.0);

    const Eigen::Index workers =
        std::max<Eigen::Index>(1, std::min<Eigen::Index>(jobs, n));
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    std::vector<std::thread> threads;
    const Eigen::Index per = (n + workers - 1) / workers;
    for (Eigen::Index w = 0; w < workers; ++w) {
      threads.emplace_back([&, w] {
        try {
          const Eigen::Index lo = w * per;
          const Eigen::Index hi = std::min<Eigen::Index>(lo + per, n);
          for (Eigen::Index k = lo; k < hi; ++k) {
            const Eigen::Index i = view.begin + k;
            DensityMatrix est = lre_estimate(ds.freq_table(i), ms);
            fid[std::size_t(k)] = fidelity(est, ds.rho(i));
          }
        } catch (...) {
          errors[std::size_t(w)] = std::current_exception();
        }
      });
    }
    for (auto& t : threads) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }

    EvalMetrics metrics = aggregate_fidelities(fid, 0);
    io::write_text(dir / "metrics.json",
                   metrics_json(metrics, n).dump(2) + "\n");
    std::cout << "lre mean infidelity " << metrics.mean_infidelity
              << " over " << n << " samples\n";
    return 0;
  }
};

// --- gradcheck ----------------------------------------------------------

struct GradcheckCmd {
  std::int64_t trials = 20;
  std::uint64_t seed = 0;
  double tolerance = 1e-4;
  std::string out;
  bool force = false;
  std::string config;
  CLI::Option* o[4] = {};

  void add(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand(
        "gradcheck", "finite-difference audit of every gradient");
    o[0] = cmd->add_option("--trials", trials,
                           "random configurations per check");
    o[1] = cmd->add_option("--seed", seed, "suite seed");
    o[2] = cmd->add_option("--tolerance", tolerance,
                           "relative error bound");
    o[3] = cmd->add_option("--out", out, "output directory");
    cmd->add_flag("--force", force, "overwrite existing output");
    cmd->add_option("--config", config, "JSON config file");
  }

  int run() {
    ConfigMerger m;
    m.load(config);
    m.field(o[0], "trials", trials);
    m.field(o[1], "seed", seed);
    m.field(o[2], "tolerance", tolerance);
    m.field(o[3], "out", out);
    m.finish();
    if (trials < 1) throw UsageError("--trials must be >= 1");

    fs::path dir = prepare_out(out, force);
    json rc;
    rc["command"] = "gradcheck";
    rc["trials"] = trials;
    rc["seed"] = seed;
    rc["tolerance"] = tolerance;
    rc["out"] = out;
    write_resolved(dir, rc);

    const std::vector<ad::GradcheckResult> results =
        ad::run_gradient_suite(trials, seed, tolerance);
    std::string csv = "check,rel_err,pass\n";
    int fails = 0;
    double worst = 0.0;
    for (const auto& r : results) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.17g", r.rel_err);
      csv += r.name + "," + buf + "," + (r.pass ? "1" : "0") + "\n";
      std::cout << (r.pass ? "PASS " : "FAIL ") << r.name << " rel_err="
                << r.rel_err << "\n";
      if (!r.pass) ++fails;
      worst = std::max(worst, r.rel_err);
    }
    io::write_text(dir / "gradcheck.csv", csv);
    std::cout << results.size() << " checks, worst rel_err " << worst
              << "\n";
    if (fails > 0) {
      std::cerr << "ERROR " << kGradcheckFailedExit << " GradcheckFailed: "
                << fails << " of " << results.size()
                << " checks exceeded tolerance " << tolerance << "\n";
      return kGradcheckFailedExit;
    }
    return 0;
  }
};

// --- sweep --------------------------------------------------------------

struct SweepCmd {
  TrainFlags flags;
  std::vector<double> grid_lr;
  std::vector<std::int64_t> grid_batch;
  std::vector<std::int64_t> grid_d_l;
  std::vector<std::int64_t> grid_d_s;
  std::vector<std::int64_t> grid_d_h;
  std::vector<std::int64_t> grid_d_rate;
  std::vector<std::int64_t> grid_epochs;
  std::string out;
  bool force = false;
  std::string config;
  CLI::Option* o[8] = {};

  void add(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand(
        "sweep", "hyperparameter grid of training runs");
    flags.add(cmd);
    o[0] = cmd->add_option("--grid-lr", grid_lr, "learning rates")
               ->delimiter(',');
    o[1] = cmd->add_option("--grid-batch", grid_batch, "batch sizes")
               ->delimiter(',');
    o[2] = cmd->add_option("--grid-d-l", grid_d_l, "layer counts")
               ->delimiter(',');
    o[3] = cmd->add_option("--grid-d-s", grid_d_s, "latent widths")
               ->delimiter(',');
    o[4] = cmd->add_option("--grid-d-h", grid_d_h, "head widths")
               ->delimiter(',');
    o[5] = cmd->add_option("--grid-d-rate", grid_d_rate,
                           "MLP expansion factors")
               ->delimiter(',');
    o[6] = cmd->add_option("--grid-epochs", grid_epochs, "epoch counts")
               ->delimiter(',');
    o[7] = cmd->add_option("--out", out, "output directory");
    cmd->add_flag("--force", force, "rerun completed cells");
    cmd->add_option("--config", config, "JSON config file");
  }

  int run() {
    ConfigMerger m;
    m.load(config);
    flags.merge(m);
    m.field(o[0], "grid_lr", grid_lr);
    m.field(o[1], "grid_batch", grid_batch);
    m.field(o[2], "grid_d_l", grid_d_l);
    m.field(o[3], "grid_d_s", grid_d_s);
    m.field(o[4], "grid_d_h", grid_d_h);
    m.field(o[5], "grid_d_rate", grid_d_rate);
    m.field(o[6], "grid_epochs", grid_epochs);
    m.field(o[7], "out", out);
    m.finish();
    if (flags.data.empty()) throw UsageError("--data is required");

    fs::path dir = prepare_out(out, force, "sweep.csv");
    json rc = flags.to_json();
    rc["command"] = "sweep";
    rc["grid_lr"] = grid_lr;
    rc["grid_batch"] = grid_batch;
    rc["grid_d_l"] = grid_d_l;
    rc["grid_d_s"] = grid_d_s;
    rc["grid_d_h"] = grid_d_h;
    rc["grid_d_rate"] = grid_d_rate;
    rc["grid_epochs"] = grid_epochs;
    rc["out"] = out;
    write_resolved(dir, rc);

    SweepGrid grid;
    grid.lr = grid_lr;
    for (auto v : grid_batch) grid.batch_size.push_back(v);
    for (auto v : grid_d_l) grid.d_l.push_back(v);
    for (auto v : grid_d_s) grid.d_s.push_back(v);
    for (auto v : grid_d_h) grid.d_h.push_back(v);
    for (auto v : grid_d_rate) grid.d_rate.push_back(v);
    for (auto v : grid_epochs) grid.epochs.push_back(v);

    std::vector<SweepRow> rows = sweep(flags.to_config(), grid, dir);
    std::size_t reused = 0;
    const SweepRow* best = nullptr;
    for (const SweepRow& r : rows) {
      if (r.reused) ++reused;
      if (best == nullptr ||
          r.final_test_infidelity < best->final_test_infidelity) {
        best = &r;
      }
    }
    std::cout << rows.size() << " cells (" << reused << " reused); best "
              << best->cell << " infidelity " << best->final_test_infidelity
              << "\n";
    return 0;
  }
};

// --- copysweep ----------------------------------------------------------

struct CopySweepCmd {
  int qubits = 2;
  std::string kind = "pure";
  std::string measurement = "cube";
  int srm_detectors = 5;
  std::int64_t samples = 1000;
  std::vector<std::string> copies{"100", "1000", "10000"};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  TrainFlags flags;
  std::string out;
  bool force = false;
  std::string config;
  CLI::Option* o[8] = {};

  void add(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand(
        "copysweep",
        "train and run the lre baseline across copy budgets and seeds");
    o[0] = cmd->add_option("--qubits", qubits, "system size")
               ->check(CLI::Range(1, 4));
    o[1] = cmd->add_option("--kind", kind, "pure | mixed")
               ->check(CLI::IsMember({"pure", "mixed"}));
    o[2] = cmd->add_option("--measurement", measurement, "cube | srm")
               ->check(CLI::IsMember({"cube", "srm"}));
    o[3] = cmd->add_option("--srm-detectors", srm_detectors,
                           "detector count for srm");
    o[4] = cmd->add_option("--samples", samples, "states per dataset");
    o[5] = cmd->add_option("--copies", copies,
                           "copy budgets (integers or 'inf')")
               ->delimiter(',');
    o[6] = cmd->add_option("--seeds", seeds, "one run per seed")
               ->delimiter(',');
    flags.add(cmd, /*with_data=*/false);
    o[7] = cmd->add_option("--out", out, "output directory");
    cmd->add_flag("--force", force, "rerun a completed sweep");
    cmd->add_option("--config", config, "JSON config file");
  }

  int run() {
    ConfigMerger m;
    m.load(config);
    m.field(o[0], "qubits", qubits);
    m.field(o[1], "kind", kind);
    m.field(o[2], "measurement", measurement);
    m.field(o[3], "srm_detectors", srm_detectors);
    m.field(o[4], "samples", samples);
    m.copies_list_field(o[5], "copies", copies);
    m.field(o[6], "seeds", seeds);
    flags.merge(m, /*with_data=*/false);
    m.field(o[7], "out", out);
    m.finish();

    DatasetConfig dc;
    dc.n_qubits = qubits;
    dc.state_kind = state_kind_from_string(kind);
    dc.measurement_kind = measurement_kind_from_string(measurement);
    dc.srm_groups = srm_detectors;
    dc.n_samples = samples;
    dc.jobs = int(flags.jobs);

    std::vector<std::int64_t> budgets;
    for (const std::string& c : copies) budgets.push_back(parse_copies(c));

    fs::path dir = prepare_out(out, force, "copysweep.csv");
    json rc = flags.to_json();
    rc["command"] = "copysweep";
    rc["qubits"] = qubits;
    rc["kind"] = kind;
    rc["measurement"] = measurement;
    rc["srm_detectors"] = srm_detectors;
    rc["samples"] = samples;
    rc["copies"] = copies;
    rc["seeds"] = seeds;
    rc["out"] = out;
    write_resolved(dir, rc);

    std::vector<CopySweepRow> rows =
        copy_sweep(dc, flags.to_config(), budgets, seeds, dir);
    for (const CopySweepRow& r : rows) {
      std::cout << r.method << " copies=" << r.copies << " seed=" << r.seed
                << " mean_log_infidelity=" << r.mean_log_infidelity << "\n";
    }
    return 0;
  }
};

// --- lossablation -------------------------------------------------------

struct LossAblationCmd {
  TrainFlags flags;
  std::string out;
  bool force = false;
  std::string config;
  CLI::Option* out_opt = nullptr;

  void add(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand(
        "lossablation",
        "train mse-only, bures-only, and integrated losses on one seed");
    flags.add(cmd);
    out_opt = cmd->add_option("--out", out, "output directory");
    cmd->add_flag("--force", force, "rerun a completed ablation");
    cmd->add_option("--config", config, "JSON config file");
  }

  int run() {
    ConfigMerger m;
    m.load(config);
    flags.merge(m);
    m.field(out_opt, "out", out);
    m.finish();
    if (flags.data.empty()) throw UsageError("--data is required");

    fs::path dir = prepare_out(out, force, "ablation.csv");
    json rc = flags.to_json();
    rc["command"] = "lossablation";
    rc["out"] = out;
    write_resolved(dir, rc);

    std::vector<AblationRow> rows = loss_ablation(flags.to_config(), dir);
    for (const AblationRow& r : rows) {
      std::cout << "beta=" << r.beta << " final_test_infidelity="
                << r.final_test_infidelity << "\n";
    }
    return 0;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"quantum state tomography lab"};
  app.require_subcommand(1);

  GenerateCmd generate;
  TrainCmd train_cmd;
  EvalCmd eval_cmd;
  LreCmd lre_cmd;
  GradcheckCmd gradcheck_cmd;
  SweepCmd sweep_cmd;
  CopySweepCmd copysweep_cmd;
  LossAblationCmd lossablation_cmd;

  generate.add(app);
  train_cmd.add(app);
  eval_cmd.add(app);
  lre_cmd.add(app);
  gradcheck_cmd.add(app);
  sweep_cmd.add(app);
  copysweep_cmd.add(app);
  lossablation_cmd.add(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      return app.exit(e);  // --help
    }
    app.exit(e);
    std::cerr << "ERROR 2 UsageError: " << e.what() << "\n";
    return 2;
  }

  try {
    if (app.got_subcommand("generate")) return generate.run();
    if (app.got_subcommand("train")) return train_cmd.run();
    if (app.got_subcommand("eval")) return eval_cmd.run();
    if (app.got_subcommand("lre")) return lre_cmd.run();
    if (app.got_subcommand("gradcheck")) return gradcheck_cmd.run();
    if (app.got_subcommand("sweep")) return sweep_cmd.run();
    if (app.got_subcommand("copysweep")) return copysweep_cmd.run();
    if (app.got_subcommand("lossablation")) return lossablation_cmd.run();
    std::cerr << "ERROR 2 UsageError: no subcommand selected\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "ERROR " << e.exit_code() << " " << e.kind() << ": "
              << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "ERROR 1 Unhandled: " << e.what() << "\n";
    return 1;
  }
}
