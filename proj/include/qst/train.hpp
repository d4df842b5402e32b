#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "qst/datagen.hpp"
#include "qst/model.hpp"
#include "qst/optim.hpp"

namespace qst {

/// Everything one training run needs. When eval_data_dir is empty the
/// trailing holdout_fraction of the training dataset becomes the eval
/// split (the leading remainder trains). When out_dir is empty nothing is
/// persisted. base_lr defaults suit the QAT; the CLI substitutes the FCN
/// default when that model is selected.
struct TrainConfig {
  std::filesystem::path data_dir;
  std::filesystem::path eval_data_dir;
  std::filesystem::path out_dir;
  ModelKind model_kind = ModelKind::qat;
  double beta = 0.09;
  Eigen::Index batch_size = 256;
  double base_lr = 0.005;
  Eigen::Index epochs = 500;
  Eigen::Index warmup_epochs = 20;
  ad::ScheduleKind lr_kind = ad::ScheduleKind::cosine;
  std::uint64_t seed = 0;
  Eigen::Index eval_every = 5;
  Eigen::Index d_s = 32;
  Eigen::Index d_l = 8;
  Eigen::Index d_h = 16;
  Eigen::Index d_rate = 8;
  double holdout_fraction = 0.1;
  Eigen::Index jobs = 1;
};

/// Contiguous sample range [begin, end) of a dataset.
struct DataView {
  const Dataset* data = nullptr;
  Eigen::Index begin = 0;
  Eigen::Index end = 0;
  Eigen::Index size() const { return end - begin; }
};

/// Fidelity statistics over an evaluation split. Samples whose predicted
/// alpha cannot form a state (ZeroTrace from an untrained head) count as
/// fidelity 0 and are tallied in failed_samples. Variance is the
/// population variance.
struct EvalMetrics {
  double mean_fidelity = 0.0;
  double min_fidelity = 0.0;
  double max_fidelity = 0.0;
  double variance_fidelity = 0.0;
  double mean_infidelity = 0.0;
  double mean_log_infidelity = 0.0;
  Eigen::Index failed_samples = 0;
};

/// One row of the training log. The three loss metrics come from the same
/// forward passes that produced the gradient, whichever loss trains. Eval
/// fields are NaN until the first evaluation and carry forward between
/// evaluations; wall-clock time lives in timing.csv, not here.
struct EpochRecord {
  Eigen::Index epoch = 0;
  double train_mse = 0.0;
  double train_bures = 0.0;
  double train_integrated = 0.0;
  double eval_infidelity = 0.0;
  double eval_log_infidelity = 0.0;
  double lr = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> records;
  EvalMetrics final_metrics;
  Eigen::Index best_epoch = 0;
  double best_eval_infidelity = 0.0;
};

/// Folds raw per-sample fidelities into the reported statistics.
EvalMetrics aggregate_fidelities(const std::vector<double>& fidelities,
                                 Eigen::Index failed_samples);

/// Batched, tape-free evaluation: forward, alpha_to_rho, fidelity against
/// the stored state. jobs > 1 splits samples across threads (the model is
/// read-only during evaluation).
EvalMetrics evaluate_model(const QstModel& m, const DataView& view,
                           Eigen::Index jobs = 1);

/// Evaluates the stored target alphas against the stored states, bypassing
/// any model: the Cholesky round-trip noise floor of a dataset.
EvalMetrics evaluate_alphas(const DataView& view);

/// Loads the checkpoint, rebuilds its model from the embedded config, and
/// evaluates it on the view.
EvalMetrics evaluate_checkpoint(const std::filesystem::path& ckpt_dir,
                                const DataView& view, Eigen::Index jobs = 1);

/// Runs the full loop: seeded shuffling, Adam with the configured
/// schedule, all three loss metrics logged per epoch, evaluation every
/// eval_every epochs and on the last, best-infidelity and final
/// checkpoints. Writes report.csv, summary.json, timing.csv, and the two
/// checkpoint directories under out_dir (when set). report.csv and
/// summary.json are byte-deterministic given the config; timing.csv is a
/// wall-clock log and is not. Throws NonFiniteLoss with the offending
/// epoch/batch if a loss leaves the reals.
TrainReport train(const TrainConfig& cfg, QstModel* final_model = nullptr);

/// Fig.-6-style budget sweep: for each (seed, copies) cell regenerate the
/// dataset at that copy budget, train the configured model, and run LRE on
/// the same eval split. Emits copysweep.csv under out_dir plus one run
/// directory per cell.
struct CopySweepRow {
  std::string method;  // "qat" | "lre"
  std::int64_t copies = 0;
  std::uint64_t seed = 0;
  double mean_infidelity = 0.0;
  double mean_log_infidelity = 0.0;
};

std::vector<CopySweepRow> copy_sweep(const DatasetConfig& data_template,
                                     const TrainConfig& train_template,
                                     const std::vector<std::int64_t>& copies,
                                     const std::vector<std::uint64_t>& seeds,
                                     const std::filesystem::path& out_dir);

/// Trains beta = 0 (MSE only), beta = 1 (Bures only), and the integrated
/// default on identical data and seed; emits ablation.csv plus one run
/// directory per beta under out_dir.
struct AblationRow {
  double beta = 0.0;
  double final_test_infidelity = 0.0;
  double final_train_mse = 0.0;
  double final_train_bures = 0.0;
};

std::vector<AblationRow> loss_ablation(const TrainConfig& base,
                                       const std::filesystem::path& out_dir);

/// Explicit-list hyperparameter grid. Empty lists inherit the base config
/// value. Cells run in deterministic order; a cell whose summary.json
/// already exists under out_dir is skipped, making interrupted sweeps
/// resumable. Emits sweep.csv.
struct SweepGrid {
  std::vector<double> lr;
  std::vector<Eigen::Index> batch_size;
  std::vector<Eigen::Index> d_l;
  std::vector<Eigen::Index> d_s;
  std::vector<Eigen::Index> d_h;
  std::vector<Eigen::Index> d_rate;
  std::vector<Eigen::Index> epochs;
};

struct SweepRow {
  std::string cell;  // tag identifying the hyperparameter combination
  double lr = 0.0;
  Eigen::Index batch_size = 0;
  Eigen::Index d_l = 0;
  Eigen::Index d_s = 0;
  Eigen::Index d_h = 0;
  Eigen::Index d_rate = 0;
  Eigen::Index epochs = 0;
  double final_test_infidelity = 0.0;
  bool reused = false;  // true if the cell was already complete
};

std::vector<SweepRow> sweep(const TrainConfig& base, const SweepGrid& grid,
                            const std::filesystem::path& out_dir);

}  // namespace qst
