#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "qst/errors.hpp"
#include "qst/io.hpp"
#include "qst/train.hpp"

using namespace qst;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("qst_train_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

fs::path make_dataset(const fs::path& dir, int n_qubits, std::int64_t n,
                      std::int64_t copies, std::uint64_t seed,
                      StateKind kind = StateKind::pure) {
  DatasetConfig dc;
  dc.n_qubits = n_qubits;
  dc.n_samples = n;
  dc.copies_per_detector = copies;
  dc.seed = seed;
  dc.state_kind = kind;
  save_dataset(build_dataset(dc), dir);
  return dir;
}

TrainConfig tiny_cfg(const fs::path& data, const fs::path& out) {
  TrainConfig cfg;
  cfg.data_dir = data;
  cfg.out_dir = out;
  cfg.d_s = 16;
  cfg.d_l = 2;
  cfg.d_h = 4;
  cfg.d_rate = 2;
  cfg.epochs = 3;
  cfg.warmup_epochs = 1;
  cfg.batch_size = 4;
  cfg.eval_every = 2;
  cfg.seed = 11;
  return cfg;
}

}  // namespace

TEST_CASE("single-sample memorization drives train mse below 1e-6") {
  fs::path root = fresh_dir("memorize");
  make_dataset(root / "data", 1, 1, kInfiniteCopies, 3);
  TrainConfig cfg;
  cfg.data_dir = root / "data";
  cfg.d_s = 16;
  cfg.d_l = 2;
  cfg.d_h = 4;
  cfg.d_rate = 4;
  cfg.epochs = 200;
  cfg.warmup_epochs = 20;
  cfg.batch_size = 1;
  cfg.seed = 5;
  TrainReport report = train(cfg);
  REQUIRE(report.records.size() == 200);
  CHECK(report.records.back().train_mse <= 1e-6);
  CHECK(report.final_metrics.mean_infidelity <= 1e-3);
  CHECK(report.final_metrics.failed_samples == 0);
}

TEST_CASE("same seed and flags reproduce every artifact byte for byte") {
  fs::path root = fresh_dir("determinism");
  make_dataset(root / "data", 1, 12, 1000, 9);
  TrainConfig cfg = tiny_cfg(root / "data", root / "run_a");
  train(cfg);
  cfg.out_dir = root / "run_b";
  train(cfg);
  for (const char* f : {"report.csv", "summary.json",
                        "checkpoint_final/params.f64",
                        "checkpoint_final/adam_state.f64",
                        "checkpoint_final/manifest.json",
                        "checkpoint_best/params.f64"}) {
    CAPTURE(f);
    CHECK(io::read_text(root / "run_a" / f) ==
          io::read_text(root / "run_b" / f));
  }
  CHECK(fs::exists(root / "run_a" / "timing.csv"));
}

TEST_CASE("stored target alphas round-trip to their states") {
  fs::path root = fresh_dir("alphas");
  make_dataset(root / "data", 2, 50, kInfiniteCopies, 21, StateKind::mixed);
  Dataset ds = load_dataset(root / "data");
  DataView view{&ds, 0, ds.n_samples()};
  EvalMetrics m = evaluate_alphas(view);
  CHECK(m.failed_samples == 0);
  CHECK(m.mean_infidelity <= 1e-7);
  CHECK(m.min_fidelity >= 1.0 - 1e-6);
}

TEST_CASE("evaluation aggregates match hand-computed statistics") {
  fs::path root = fresh_dir("aggregate");
  make_dataset(root / "data", 1, 4, kInfiniteCopies, 33, StateKind::mixed);
  Dataset ds = load_dataset(root / "data");
  DataView view{&ds, 1, 3};
  const double f1 = fidelity(alpha_to_rho(ds.alpha(1)), ds.rho(1));
  const double f2 = fidelity(alpha_to_rho(ds.alpha(2)), ds.rho(2));
  EvalMetrics m = evaluate_alphas(view);
  const double mean = (f1 + f2) / 2.0;
  CHECK(m.mean_fidelity == doctest::Approx(mean).epsilon(1e-15));
  CHECK(m.min_fidelity == doctest::Approx(std::min(f1, f2)).epsilon(1e-15));
  CHECK(m.max_fidelity == doctest::Approx(std::max(f1, f2)).epsilon(1e-15));
  const double var =
      ((f1 - mean) * (f1 - mean) + (f2 - mean) * (f2 - mean)) / 2.0;
  CHECK(m.variance_fidelity == doctest::Approx(var).epsilon(1e-12));
  CHECK(m.mean_infidelity == doctest::Approx(1.0 - mean).epsilon(1e-15));
  const double log_mean = (log_infidelity_of(1.0 - f1) +
                           log_infidelity_of(1.0 - f2)) / 2.0;
  CHECK(m.mean_log_infidelity == doctest::Approx(log_mean).epsilon(1e-15));
}

TEST_CASE("an all-zero head makes every sample a counted failure") {
  fs::path root = fresh_dir("zerohead");
  make_dataset(root / "data", 1, 6, kInfiniteCopies, 4);
  Dataset ds = load_dataset(root / "data");
  QatConfig mc;
  mc.n_qubits = 1;
  mc.d = 2;
  mc.d_g = ds.d_g;
  mc.d_s = 16;
  mc.d_l = 2;
  mc.d_h = 4;
  mc.d_rate = 2;
  mc.seed = 1;
  QstModel model = build_model(ModelKind::qat, mc);
  std::fill(model.param("head.w").data().begin(),
            model.param("head.w").data().end(), 0.0);
  std::fill(model.param("head.b").data().begin(),
            model.param("head.b").data().end(), 0.0);
  DataView view{&ds, 0, ds.n_samples()};
  EvalMetrics m = evaluate_model(model, view);
  CHECK(m.failed_samples == ds.n_samples());
  CHECK(m.mean_fidelity == 0.0);
  CHECK(m.mean_infidelity == 1.0);
  CHECK(m.mean_log_infidelity == 0.0);
  CHECK(m.variance_fidelity == 0.0);
}

TEST_CASE("evaluation does not mutate the model") {
  fs::path root = fresh_dir("evalconst");
  make_dataset(root / "data", 1, 5, 1000, 8);
  Dataset ds = load_dataset(root / "data");
  QatConfig mc;
  mc.n_qubits = 1;
  mc.d = 2;
  mc.d_g = ds.d_g;
  mc.d_s = 16;
  mc.d_l = 2;
  mc.d_h = 4;
  mc.d_rate = 2;
  mc.seed = 2;
  QstModel model = build_model(ModelKind::qat, mc);
  std::vector<std::vector<double>> before;
  for (const auto& p : model.params) before.push_back(p.tensor.data());
  DataView view{&ds, 0, ds.n_samples()};
  evaluate_model(model, view);
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    CHECK(model.params[i].tensor.data() == before[i]);
    CHECK(!model.params[i].tensor.has_grad());
  }
}

TEST_CASE("threaded evaluation agrees with the single-thread path") {
  fs::path root = fresh_dir("evaljobs");
  make_dataset(root / "data", 1, 17, 1000, 14);
  Dataset ds = load_dataset(root / "data");
  QatConfig mc;
  mc.n_qubits = 1;
  mc.d = 2;
  mc.d_g = ds.d_g;
  mc.d_s = 16;
  mc.d_l = 2;
  mc.d_h = 4;
  mc.d_rate = 2;
  mc.seed = 6;
  QstModel model = build_model(ModelKind::qat, mc);
  DataView view{&ds, 0, ds.n_samples()};
  EvalMetrics a = evaluate_model(model, view, 1);
  EvalMetrics b = evaluate_model(model, view, 4);
  CHECK(a.mean_fidelity == doctest::Approx(b.mean_fidelity).epsilon(1e-12));
  CHECK(a.min_fidelity == doctest::Approx(b.min_fidelity).epsilon(1e-12));
  CHECK(a.failed_samples == b.failed_samples);
}

TEST_CASE("logged integrated loss recombines from mse and bures") {
  fs::path root = fresh_dir("integrated");
  make_dataset(root / "data", 1, 10, 1000, 19);
  TrainConfig cfg = tiny_cfg(root / "data", {});
  cfg.epochs = 4;

  SUBCASE("default beta") {
    TrainReport report = train(cfg);
    for (const EpochRecord& r : report.records) {
      const double expected =
          cfg.beta * r.train_bures + (1.0 - cfg.beta) * r.train_mse;
      CHECK(std::abs(r.train_integrated - expected) <= 1e-10);
    }
  }
  SUBCASE("beta 0 collapses to mse") {
    cfg.beta = 0.0;
    TrainReport report = train(cfg);
    for (const EpochRecord& r : report.records) {
      CHECK(r.train_integrated == r.train_mse);
    }
  }
  SUBCASE("beta 1 collapses to bures") {
    cfg.beta = 1.0;
    TrainReport report = train(cfg);
    for (const EpochRecord& r : report.records) {
      CHECK(r.train_integrated == r.train_bures);
    }
  }
}

TEST_CASE("eval columns stay empty until the first evaluation then carry") {
  fs::path root = fresh_dir("carry");
  make_dataset(root / "data", 1, 10, 1000, 19);
  TrainConfig cfg = tiny_cfg(root / "data", root / "out");
  cfg.epochs = 7;
  cfg.eval_every = 5;
  TrainReport report = train(cfg);
  REQUIRE(report.records.size() == 7);
  for (int e = 0; e < 4; ++e) {
    CHECK(std::isnan(report.records[std::size_t(e)].eval_infidelity));
  }
  CHECK(!std::isnan(report.records[4].eval_infidelity));
  CHECK(report.records[5].eval_infidelity == report.records[4].eval_infidelity);
  CHECK(!std::isnan(report.records[6].eval_infidelity));

  std::string csv = io::read_text(root / "out" / "report.csv");
  const std::string first_line = csv.substr(0, csv.find('\n', csv.find('\n') + 1));
  CHECK(first_line.find(",,") != std::string::npos);
}

TEST_CASE("trained model handed back matches its own final evaluation") {
  fs::path root = fresh_dir("handback");
  make_dataset(root / "data", 1, 12, 1000, 23);
  TrainConfig cfg = tiny_cfg(root / "data", {});
  QstModel model;
  TrainReport report = train(cfg, &model);
  Dataset ds = load_dataset(root / "data");
  const Eigen::Index n_eval =
      Eigen::Index(std::llround(double(ds.n_samples()) * cfg.holdout_fraction));
  DataView eval_view{&ds, ds.n_samples() - n_eval, ds.n_samples()};
  EvalMetrics m = evaluate_model(model, eval_view);
  CHECK(m.mean_infidelity == report.final_metrics.mean_infidelity);
  CHECK(m.failed_samples == report.final_metrics.failed_samples);
}

TEST_CASE("final checkpoint restores to the reported metrics") {
  fs::path root = fresh_dir("ckpt");
  make_dataset(root / "data", 1, 12, 1000, 29);
  TrainConfig cfg = tiny_cfg(root / "data", root / "out");
  TrainReport report = train(cfg);
  Dataset ds = load_dataset(root / "data");
  const Eigen::Index n_eval =
      Eigen::Index(std::llround(double(ds.n_samples()) * cfg.holdout_fraction));
  DataView eval_view{&ds, ds.n_samples() - n_eval, ds.n_samples()};
  EvalMetrics m = evaluate_checkpoint(root / "out" / "checkpoint_final",
                                      eval_view);
  CHECK(m.mean_infidelity == report.final_metrics.mean_infidelity);

  SUBCASE("dimension mismatch is rejected") {
    make_dataset(root / "data2", 2, 3, 1000, 7);
    Dataset big = load_dataset(root / "data2");
    DataView bad{&big, 0, big.n_samples()};
    CHECK_THROWS_AS(
        evaluate_checkpoint(root / "out" / "checkpoint_final", bad),
        DimensionMismatch);
  }
}

TEST_CASE("config validation rejects bad ranges") {
  fs::path root = fresh_dir("badcfg");
  make_dataset(root / "data", 1, 6, 1000, 2);
  TrainConfig cfg = tiny_cfg(root / "data", {});
  SUBCASE("beta above one") {
    cfg.beta = 1.5;
    CHECK_THROWS_AS(train(cfg), ConfigError);
  }
  SUBCASE("warmup beyond epochs") {
    cfg.warmup_epochs = cfg.epochs + 1;
    CHECK_THROWS_AS(train(cfg), ConfigError);
  }
  SUBCASE("zero batch") {
    cfg.batch_size = 0;
    CHECK_THROWS_AS(train(cfg), ConfigError);
  }
  SUBCASE("eval dataset with different dims") {
    make_dataset(root / "eval", 2, 3, 1000, 2);
    cfg.eval_data_dir = root / "eval";
    CHECK_THROWS_AS(train(cfg), DimensionMismatch);
  }
}

TEST_CASE("exploding optimizer step raises a located non-finite error") {
  fs::path root = fresh_dir("nonfinite");
  make_dataset(root / "data", 1, 6, 1000, 2);
  TrainConfig cfg = tiny_cfg(root / "data", {});
  cfg.base_lr = 1e200;
  cfg.warmup_epochs = 0;
  cfg.epochs = 5;
  CHECK_THROWS_AS(train(cfg), NonFiniteLoss);
}

TEST_CASE("loss ablation trains all three betas and writes the table") {
  fs::path root = fresh_dir("ablation");
  make_dataset(root / "data", 1, 10, 1000, 31);
  TrainConfig base = tiny_cfg(root / "data", {});
  base.epochs = 2;
  std::vector<AblationRow> rows = loss_ablation(base, root / "out");
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].beta == 0.0);
  CHECK(rows[1].beta == 1.0);
  CHECK(rows[2].beta == doctest::Approx(0.09));
  CHECK(fs::exists(root / "out" / "ablation.csv"));
  for (const char* dir : {"beta_0", "beta_1", "beta_integrated"}) {
    CHECK(fs::exists(root / "out" / dir / "summary.json"));
  }
}

TEST_CASE("a single-cell sweep reproduces a plain training run") {
  fs::path root = fresh_dir("sweep1");
  make_dataset(root / "data", 1, 10, 1000, 37);
  TrainConfig base = tiny_cfg(root / "data", root / "plain");
  train(base);
  base.out_dir.clear();
  std::vector<SweepRow> rows = sweep(base, SweepGrid{}, root / "grid");
  REQUIRE(rows.size() == 1);
  CHECK(!rows[0].reused);
  CHECK(io::read_text(root / "grid" / rows[0].cell / "report.csv") ==
        io::read_text(root / "plain" / "report.csv"));
  CHECK(fs::exists(root / "grid" / "sweep.csv"));

  SUBCASE("second pass reuses the completed cell") {
    std::vector<SweepRow> again = sweep(base, SweepGrid{}, root / "grid");
    REQUIRE(again.size() == 1);
    CHECK(again[0].reused);
    CHECK(again[0].final_test_infidelity == rows[0].final_test_infidelity);
  }
}

TEST_CASE("sweep enumerates the grid product in deterministic order") {
  fs::path root = fresh_dir("sweepgrid");
  make_dataset(root / "data", 1, 8, 1000, 41);
  TrainConfig base = tiny_cfg(root / "data", {});
  base.epochs = 1;
  SweepGrid grid;
  grid.lr = {0.01, 0.001};
  grid.d_l = {1, 2};
  std::vector<SweepRow> rows = sweep(base, grid, root / "grid");
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].lr == 0.01);
  CHECK(rows[0].d_l == 1);
  CHECK(rows[1].d_l == 2);
  CHECK(rows[2].lr == 0.001);
  for (const SweepRow& r : rows) {
    CHECK(r.batch_size == base.batch_size);
    CHECK(r.epochs == 1);
  }
}

TEST_CASE("copy sweep emits one qat and one lre row per cell") {
  fs::path root = fresh_dir("copysweep");
  DatasetConfig dc;
  dc.n_qubits = 1;
  dc.n_samples = 10;
  TrainConfig tc = tiny_cfg({}, {});
  tc.epochs = 2;
  std::vector<CopySweepRow> rows =
      copy_sweep(dc, tc, {kInfiniteCopies}, {1}, root / "out");
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].method == "qat");
  CHECK(rows[1].method == "lre");
  CHECK(rows[0].copies == kInfiniteCopies);
  CHECK(rows[1].seed == 1);
  CHECK(rows[1].mean_infidelity <= 1e-6);  // exact frequencies, exact solver
  CHECK(fs::exists(root / "out" / "copysweep.csv"));
  CHECK(fs::exists(root / "out" / "seed1_copiesinf" / "train" / "summary.json"));
}
