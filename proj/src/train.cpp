#include "qst/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <optional>
#include <thread>

#include "json.hpp"
#include "qst/errors.hpp"
#include "qst/estimators.hpp"
#include "qst/io.hpp"
#include "qst/loss.hpp"
#include "qst/qcore.hpp"
#include "qst/rng.hpp"

namespace qst {

using ad::Tensor;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void validate(const TrainConfig& cfg) {
  if (cfg.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (cfg.epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (cfg.warmup_epochs < 0 || cfg.warmup_epochs > cfg.epochs) {
    throw ConfigError("train: need 0 <= warmup_epochs <= epochs");
  }
  if (cfg.eval_every < 1) throw ConfigError("train: eval_every must be >= 1");
  if (!(cfg.beta >= 0.0 && cfg.beta <= 1.0)) {
    throw ConfigError("train: beta must lie in [0,1]");
  }
  if (cfg.eval_data_dir.empty() &&
      !(cfg.holdout_fraction >= 0.0 && cfg.holdout_fraction < 1.0)) {
    throw ConfigError("train: holdout_fraction must lie in [0,1)");
  }
  if (cfg.jobs < 1) throw ConfigError("train: jobs must be >= 1");
}

// Copies the chosen samples into batch tensors shaped (B, d_g, d) and
// (B, d^2).
void gather_batch(const Dataset& data, const std::vector<Eigen::Index>& order,
                  Eigen::Index from, Eigen::Index to, Tensor& freqs,
                  Tensor& targets) {
  const Eigen::Index row = data.d_g * data.d;
  const Eigen::Index alpha_len = data.d * data.d;
  const Eigen::Index b = to - from;
  freqs = Tensor::zeros({b, data.d_g, data.d});
  targets = Tensor::zeros({b, alpha_len});
  for (Eigen::Index k = 0; k < b; ++k) {
    const Eigen::Index i = order[std::size_t(from + k)];
    std::memcpy(freqs.data().data() + k * row, data.freqs.data() + i * row,
                std::size_t(row) * sizeof(double));
    std::memcpy(targets.data().data() + k * alpha_len,
                data.alphas.data() + i * alpha_len,
                std::size_t(alpha_len) * sizeof(double));
  }
}

void shuffle_indices(std::vector<Eigen::Index>& idx, Rng& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) {
    const std::size_t j = std::size_t(rng.next_u64() % i);
    std::swap(idx[i - 1], idx[j]);
  }
}

struct FidelityAccumulator {
  std::vector<double> fidelities;
  Eigen::Index failed = 0;
};

// Fidelities of model predictions over view samples [lo, hi), written into
// out[lo - view.begin ...]. Runs tape-free; safe to call concurrently on
// disjoint ranges.
void eval_range(const QstModel& m, const DataView& view, Eigen::Index lo,
                Eigen::Index hi, const Tensor& ops, std::vector<double>& out,
                Eigen::Index& failed) {
  ad::NoGradGuard guard;
  const Dataset& data = *view.data;
  const Eigen::Index chunk = 256;
  std::vector<Eigen::Index> order;
  for (Eigen::Index i = lo; i < hi; ++i) order.push_back(i);
  const Eigen::Index alpha_len = data.d * data.d;
  for (Eigen::Index from = 0; from < Eigen::Index(order.size());
       from += chunk) {
    const Eigen::Index to =
        std::min<Eigen::Index>(from + chunk, Eigen::Index(order.size()));
    Tensor freqs, targets;
    gather_batch(data, order, from, to, freqs, targets);
    Tensor alpha_hat = model_forward(m, freqs, ops);
    for (Eigen::Index k = 0; k < to - from; ++k) {
      const Eigen::Index sample = order[std::size_t(from + k)];
      Eigen::Map<const Eigen::VectorXd> alpha(
          alpha_hat.data().data() + k * alpha_len, alpha_len);
      double fid = 0.0;
      try {
        DensityMatrix est = alpha_to_rho(alpha);
        fid = fidelity(est, data.rho(sample));
      } catch (const Error&) {
        ++failed;
      }
      out[std::size_t(sample - view.begin)] = fid;
    }
  }
}

}  // namespace

EvalMetrics aggregate_fidelities(const std::vector<double>& fid,
                                 Eigen::Index failed) {
  EvalMetrics m;
  m.failed_samples = failed;
  if (fid.empty()) {
    m.mean_fidelity = m.min_fidelity = m.max_fidelity =
        std::numeric_limits<double>::quiet_NaN();
    m.variance_fidelity = m.mean_infidelity = m.mean_log_infidelity =
        std::numeric_limits<double>::quiet_NaN();
    return m;
  }
  const double n = double(fid.size());
  double sum = 0.0, log_sum = 0.0;
  double lo = fid[0], hi = fid[0];
  for (double f : fid) {
    sum += f;
    log_sum += log_infidelity_of(1.0 - f);
    lo = std::min(lo, f);
    hi = std::max(hi, f);
  }
  m.mean_fidelity = sum / n;
  m.min_fidelity = lo;
  m.max_fidelity = hi;
  double var = 0.0;
  for (double f : fid) var += (f - m.mean_fidelity) * (f - m.mean_fidelity);
  m.variance_fidelity = var / n;
  m.mean_infidelity = 1.0 - m.mean_fidelity;
  m.mean_log_infidelity = log_sum / n;
  return m;
}

namespace {

void check_view(const DataView& view, const char* who) {
  if (view.data == nullptr || view.begin < 0 || view.end < view.begin ||
      view.end > view.data->n_samples()) {
    throw DimensionMismatch(std::string(who) + ": bad sample range");
  }
}

void write_report_files(const fs::path& out_dir, const TrainReport& report,
                        const TrainConfig& cfg, const QstModel& model,
                        Eigen::Index train_samples, Eigen::Index eval_samples,
                        const std::vector<double>& epoch_seconds) {
  fs::create_directories(out_dir);
  std::string csv =
      "epoch,train_mse,train_bures,train_integrated,eval_infidelity,"
      "eval_log_infidelity,lr\n";
  for (const EpochRecord& r : report.records) {
    csv += std::to_string(r.epoch) + "," + fmt(r.train_mse) + "," +
           fmt(r.train_bures) + "," + fmt(r.train_integrated) + "," +
           fmt(r.eval_infidelity) + "," + fmt(r.eval_log_infidelity) + "," +
           fmt(r.lr) + "\n";
  }
  io::write_text(out_dir / "report.csv", csv);

  std::string timing = "epoch,seconds\n";
  for (std::size_t i = 0; i < epoch_seconds.size(); ++i) {
    timing += std::to_string(i + 1) + "," + fmt(epoch_seconds[i]) + "\n";
  }
  io::write_text(out_dir / "timing.csv", timing);

  json summary;
  summary["epochs"] = cfg.epochs;
  summary["beta"] = cfg.beta;
  summary["base_lr"] = cfg.base_lr;
  summary["batch_size"] = cfg.batch_size;
  summary["warmup_epochs"] = cfg.warmup_epochs;
  summary["lr_kind"] = ad::to_string(cfg.lr_kind);
  summary["seed"] = cfg.seed;
  summary["train_samples"] = train_samples;
  summary["eval_samples"] = eval_samples;
  summary["best_epoch"] = report.best_epoch;
  summary["best_eval_infidelity"] = report.best_eval_infidelity;
  summary["model"] = json::parse(model_config_json(model));
  json final;
  final["mean_fidelity"] = report.final_metrics.mean_fidelity;
  final["min_fidelity"] = report.final_metrics.min_fidelity;
  final["max_fidelity"] = report.final_metrics.max_fidelity;
  final["variance_fidelity"] = report.final_metrics.variance_fidelity;
  final["mean_infidelity"] = report.final_metrics.mean_infidelity;
  final["mean_log_infidelity"] = report.final_metrics.mean_log_infidelity;
  final["failed_samples"] = report.final_metrics.failed_samples;
  summary["final"] = final;
  io::write_text(out_dir / "summary.json", summary.dump(2) + "\n");
}

}  // namespace

EvalMetrics evaluate_model(const QstModel& m, const DataView& view,
                           Eigen::Index jobs) {
  check_view(view, "evaluate_model");
  const Dataset& data = *view.data;
  if (m.config.d != data.d || m.config.d_g != data.d_g) {
    throw DimensionMismatch(
        "evaluate_model: model wants (" + std::to_string(m.config.d_g) + "," +
        std::to_string(m.config.d) + "), dataset has (" +
        std::to_string(data.d_g) + "," + std::to_string(data.d) + ")");
  }
  const Eigen::Index n = view.size();
  std::vector<double> fid(static_cast<std::size_t>(n), 0.0);
  Tensor ops = operator_rows(data.measurement_set());
  if (n == 0) return aggregate_fidelities(fid, 0);

  const Eigen::Index workers = std::min<Eigen::Index>(std::max<Eigen::Index>(jobs, 1), n);
  if (workers <= 1) {
    Eigen::Index failed = 0;
    eval_range(m, view, view.begin, view.end, ops, fid, failed);
    return aggregate_fidelities(fid, failed);
  }
  std::vector<Eigen::Index> fails(static_cast<std::size_t>(workers), 0);
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  std::vector<std::thread> threads;
  const Eigen::Index per = (n + workers - 1) / workers;
  for (Eigen::Index w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        const Eigen::Index lo = view.begin + w * per;
        const Eigen::Index hi = std::min<Eigen::Index>(lo + per, view.end);
        if (lo < hi) {
          eval_range(m, view, lo, hi, ops, fid, fails[std::size_t(w)]);
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
  Eigen::Index failed = 0;
  for (Eigen::Index f : fails) failed += f;
  return aggregate_fidelities(fid, failed);
}

EvalMetrics evaluate_alphas(const DataView& view) {
  check_view(view, "evaluate_alphas");
  const Dataset& data = *view.data;
  std::vector<double> fid;
  Eigen::Index failed = 0;
  for (Eigen::Index i = view.begin; i < view.end; ++i) {
    try {
      fid.push_back(fidelity(alpha_to_rho(data.alpha(i)), data.rho(i)));
    } catch (const Error&) {
      fid.push_back(0.0);
      ++failed;
    }
  }
  return aggregate_fidelities(fid, failed);
}

EvalMetrics evaluate_checkpoint(const fs::path& ckpt_dir, const DataView& view,
                                Eigen::Index jobs) {
  ad::Checkpoint ckpt = ad::load_checkpoint(ckpt_dir);
  if (ckpt.config_json.empty()) {
    throw FormatError("checkpoint has no embedded model config");
  }
  QstModel model = model_from_config_json(ckpt.config_json);
  ad::restore_parameters(ckpt, model.params);
  return evaluate_model(model, view, jobs);
}

TrainReport train(const TrainConfig& cfg, QstModel* final_model) {
  validate(cfg);
  Dataset data = load_dataset(cfg.data_dir);
  std::optional<Dataset> eval_data;
  DataView train_view{&data, 0, data.n_samples()};
  DataView eval_view{};
  if (!cfg.eval_data_dir.empty()) {
    eval_data.emplace(load_dataset(cfg.eval_data_dir));
    if (eval_data->d != data.d || eval_data->d_g != data.d_g) {
      throw DimensionMismatch("train: eval dataset dims disagree");
    }
    eval_view = DataView{&*eval_data, 0, eval_data->n_samples()};
  } else {
    const Eigen::Index n = data.n_samples();
    const Eigen::Index n_eval = std::min<Eigen::Index>(
        n - 1, Eigen::Index(std::llround(double(n) * cfg.holdout_fraction)));
    if (n_eval > 0) {
      train_view.end = n - n_eval;
      eval_view = DataView{&data, n - n_eval, n};
    } else {
      // Dataset too small to split: evaluate on the training samples.
      eval_view = train_view;
    }
  }

  Rng master(cfg.seed);
  QatConfig mc;
  mc.n_qubits = data.config.n_qubits;
  mc.d = data.d;
  mc.d_g = data.d_g;
  mc.d_s = cfg.d_s;
  mc.d_l = cfg.d_l;
  mc.d_h = cfg.d_h;
  mc.d_rate = cfg.d_rate;
  mc.seed = master.next_u64();
  QstModel model = build_model(cfg.model_kind, mc);
  Tensor ops = operator_rows(data.measurement_set());
  ad::AdamState adam = ad::AdamState::for_params(model.params);

  std::vector<Eigen::Index> order;
  for (Eigen::Index i = train_view.begin; i < train_view.end; ++i) {
    order.push_back(i);
  }
  const Eigen::Index n_train = Eigen::Index(order.size());

  TrainReport report;
  report.best_eval_infidelity = std::numeric_limits<double>::infinity();
  std::vector<double> epoch_seconds;
  double last_eval_inf = std::numeric_limits<double>::quiet_NaN();
  double last_eval_log = std::numeric_limits<double>::quiet_NaN();
  const Eigen::Index warmup =
      std::min<Eigen::Index>(cfg.warmup_epochs, cfg.epochs);

  for (Eigen::Index epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    // Epoch e in [1, epochs] maps to schedule step e of epochs + 1 so the
    // final epoch still trains at a nonzero rate.
    const double lr = ad::lr_schedule(epoch, cfg.epochs + 1, cfg.base_lr,
                                      warmup, cfg.lr_kind);
    shuffle_indices(order, master);

    double sum_mse = 0.0, sum_bures = 0.0, sum_integrated = 0.0;
    Eigen::Index batch_index = 0;
    for (Eigen::Index from = 0; from < n_train;
         from += cfg.batch_size, ++batch_index) {
      const Eigen::Index to =
          std::min<Eigen::Index>(from + cfg.batch_size, n_train);
      Tensor freqs, targets;
      gather_batch(data, order, from, to, freqs, targets);
      Tensor alpha_hat = model_forward(model, freqs, ops);
      Tensor mu = mse_distance(alpha_hat, targets);
      Tensor upsilon = bures_approx(alpha_hat, targets);
      Tensor integrated = ad::add(ad::scale(upsilon, cfg.beta),
                                  ad::scale(mu, 1.0 - cfg.beta));
      const double mu_v = mu.value();
      const double up_v = upsilon.value();
      const double in_v = integrated.value();
      if (!std::isfinite(mu_v) || !std::isfinite(up_v) ||
          !std::isfinite(in_v)) {
        throw NonFiniteLoss("train: non-finite loss at epoch " +
                            std::to_string(epoch) + ", batch " +
                            std::to_string(batch_index));
      }
      for (auto& p : model.params) p.tensor.zero_grad();
      integrated.backward();
      ad::adam_step(model.params, adam, lr);
      const double weight = double(to - from);
      sum_mse += mu_v * weight;
      sum_bures += up_v * weight;
      sum_integrated += in_v * weight;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_mse = sum_mse / double(n_train);
    rec.train_bures = sum_bures / double(n_train);
    rec.train_integrated = sum_integrated / double(n_train);
    rec.lr = lr;

    if (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
      EvalMetrics metrics = evaluate_model(model, eval_view, cfg.jobs);
      last_eval_inf = metrics.mean_infidelity;
      last_eval_log = metrics.mean_log_infidelity;
      report.final_metrics = metrics;
      if (metrics.mean_infidelity < report.best_eval_infidelity) {
        report.best_eval_infidelity = metrics.mean_infidelity;
        report.best_epoch = epoch;
        if (!cfg.out_dir.empty()) {
          ad::save_checkpoint(cfg.out_dir / "checkpoint_best", model.params,
                              model_config_json(model));
        }
      }
    }
    rec.eval_infidelity = last_eval_inf;
    rec.eval_log_infidelity = last_eval_log;
    report.records.push_back(rec);
    epoch_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count());
  }

  if (!cfg.out_dir.empty()) {
    ad::save_checkpoint(cfg.out_dir / "checkpoint_final", model.params,
                        model_config_json(model), &adam);
    write_report_files(cfg.out_dir, report, cfg, model, n_train,
                       eval_view.size(), epoch_seconds);
  }
  if (final_model != nullptr) *final_model = std::move(model);
  return report;
}

std::vector<CopySweepRow> copy_sweep(const DatasetConfig& data_template,
                                     const TrainConfig& train_template,
                                     const std::vector<std::int64_t>& copies,
                                     const std::vector<std::uint64_t>& seeds,
                                     const fs::path& out_dir) {
  if (copies.empty() || seeds.empty()) {
    throw ConfigError("copy_sweep: need at least one copy budget and seed");
  }
  std::vector<CopySweepRow> rows;
  for (std::uint64_t seed : seeds) {
    for (std::int64_t budget : copies) {
      DatasetConfig dc = data_template;
      dc.copies_per_detector = budget;
      dc.seed = seed;
      const std::string cell = "seed" + std::to_string(seed) + "_copies" +
                               (budget < 0 ? std::string("inf")
                                           : std::to_string(budget));
      const fs::path cell_dir = out_dir / cell;
      Dataset ds = build_dataset(dc);
      save_dataset(ds, cell_dir / "data");

      TrainConfig tc = train_template;
      tc.data_dir = cell_dir / "data";
      tc.eval_data_dir.clear();
      tc.out_dir = cell_dir / "train";
      tc.seed = seed;
      TrainReport report = train(tc);
      rows.push_back({"qat", budget, seed,
                      report.final_metrics.mean_infidelity,
                      report.final_metrics.mean_log_infidelity});

      // LRE baseline on the same eval split the trainer held out.
      const Eigen::Index n = ds.n_samples();
      const Eigen::Index n_eval = std::min<Eigen::Index>(
          n - 1, Eigen::Index(std::llround(double(n) *
                                           train_template.holdout_fraction)));
      const Eigen::Index begin = n_eval > 0 ? n - n_eval : 0;
      const MeasurementSet ms = ds.measurement_set();
      double inf_sum = 0.0, log_sum = 0.0;
      Eigen::Index count = 0;
      for (Eigen::Index i = begin; i < n; ++i, ++count) {
        DensityMatrix est = lre_estimate(ds.freq_table(i), ms);
        const double infid = infidelity(est, ds.rho(i));
        inf_sum += infid;
        log_sum += log_infidelity_of(infid);
      }
      rows.push_back({"lre", budget, seed, inf_sum / double(count),
                      log_sum / double(count)});
    }
  }
  fs::create_directories(out_dir);
  std::string csv = "method,copies,seed,mean_infidelity,mean_log_infidelity\n";
  for (const CopySweepRow& r : rows) {
    csv += r.method + "," +
           (r.copies < 0 ? std::string("inf") : std::to_string(r.copies)) +
           "," + std::to_string(r.seed) + "," + fmt(r.mean_infidelity) + "," +
           fmt(r.mean_log_infidelity) + "\n";
  }
  io::write_text(out_dir / "copysweep.csv", csv);
  return rows;
}

std::vector<AblationRow> loss_ablation(const TrainConfig& base,
                                       const fs::path& out_dir) {
  struct Run {
    const char* name;
    double beta;
  };
  const Run runs[] = {{"beta_0", 0.0}, {"beta_1", 1.0},
                      {"beta_integrated", base.beta}};
  std::vector<AblationRow> rows;
  for (const Run& run : runs) {
    TrainConfig cfg = base;
    cfg.beta = run.beta;
    cfg.out_dir = out_dir / run.name;
    TrainReport report = train(cfg);
    const EpochRecord& last = report.records.back();
    rows.push_back({run.beta, report.final_metrics.mean_infidelity,
                    last.train_mse, last.train_bures});
  }
  fs::create_directories(out_dir);
  std::string csv =
      "beta,final_test_infidelity,final_train_mse,final_train_bures\n";
  for (const AblationRow& r : rows) {
    csv += fmt(r.beta) + "," + fmt(r.final_test_infidelity) + "," +
           fmt(r.final_train_mse) + "," + fmt(r.final_train_bures) + "\n";
  }
  io::write_text(out_dir / "ablation.csv", csv);
  return rows;
}

std::vector<SweepRow> sweep(const TrainConfig& base, const SweepGrid& grid,
                            const fs::path& out_dir) {
  auto or_default = [](auto list, auto fallback) {
    if (list.empty()) list.push_back(fallback);
    return list;
  };
  const std::vector<double> lrs = or_default(grid.lr, base.base_lr);
  const std::vector<Eigen::Index> batches =
      or_default(grid.batch_size, base.batch_size);
  const std::vector<Eigen::Index> dls = or_default(grid.d_l, base.d_l);
  const std::vector<Eigen::Index> dss = or_default(grid.d_s, base.d_s);
  const std::vector<Eigen::Index> dhs = or_default(grid.d_h, base.d_h);
  const std::vector<Eigen::Index> drates =
      or_default(grid.d_rate, base.d_rate);
  const std::vector<Eigen::Index> epoch_list =
      or_default(grid.epochs, base.epochs);

  std::vector<SweepRow> rows;
  for (double lr : lrs) {
    for (Eigen::Index batch : batches) {
      for (Eigen::Index d_l : dls) {
        for (Eigen::Index d_s : dss) {
          for (Eigen::Index d_h : dhs) {
            for (Eigen::Index d_rate : drates) {
              for (Eigen::Index epochs : epoch_list) {
                char tag[128];
                std::snprintf(tag, sizeof tag,
                              "lr%g_b%lld_dl%lld_ds%lld_dh%lld_dr%lld_e%lld",
                              lr, static_cast<long long>(batch),
                              static_cast<long long>(d_l),
                              static_cast<long long>(d_s),
                              static_cast<long long>(d_h),
                              static_cast<long long>(d_rate),
                              static_cast<long long>(epochs));
                SweepRow row;
                row.cell = tag;
                row.lr = lr;
                row.batch_size = batch;
                row.d_l = d_l;
                row.d_s = d_s;
                row.d_h = d_h;
                row.d_rate = d_rate;
                row.epochs = epochs;
                const fs::path cell_dir = out_dir / tag;
                if (fs::exists(cell_dir / "summary.json")) {
                  json summary =
                      json::parse(io::read_text(cell_dir / "summary.json"));
                  row.final_test_infidelity =
                      summary.at("final").at("mean_infidelity").get<double>();
                  row.reused = true;
                } else {
                  TrainConfig cfg = base;
                  cfg.base_lr = lr;
                  cfg.batch_size = batch;
                  cfg.d_l = d_l;
                  cfg.d_s = d_s;
                  cfg.d_h = d_h;
                  cfg.d_rate = d_rate;
                  cfg.epochs = epochs;
                  cfg.out_dir = cell_dir;
                  TrainReport report = train(cfg);
                  row.final_test_infidelity =
                      report.final_metrics.mean_infidelity;
                }
                rows.push_back(row);
              }
            }
          }
        }
      }
    }
  }
  fs::create_directories(out_dir);
  std::string csv =
      "cell,lr,batch_size,d_l,d_s,d_h,d_rate,epochs,final_test_infidelity,"
      "reused\n";
  for (const SweepRow& r : rows) {
    csv += r.cell + "," + fmt(r.lr) + "," + std::to_string(r.batch_size) +
           "," + std::to_string(r.d_l) + "," + std::to_string(r.d_s) + "," +
           std::to_string(r.d_h) + "," + std::to_string(r.d_rate) + "," +
           std::to_string(r.epochs) + "," + fmt(r.final_test_infidelity) +
           "," + (r.reused ? "1" : "0") + "\n";
  }
  io::write_text(out_dir / "sweep.csv", csv);
  return rows;
}

}  // namespace qst
