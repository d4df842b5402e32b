#include <cmath>
#include <vector>

#include "doctest.h"
#include "qst/errors.hpp"
#include "qst/gradcheck.hpp"
#include "qst/loss.hpp"
#include "qst/model.hpp"
#include "qst/povm.hpp"
#include "qst/qcore.hpp"
#include "qst/rng.hpp"

using namespace qst;
using ad::Shape;
using ad::Tensor;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = false) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  for (double& v : t.data()) v = rng.uniform(-1.0, 1.0);
  return t;
}

// Direct transcription of scaled dot-product attention: explicit loops per
// batch, head, query, key. Serves as the oracle for the vectorized path.
std::vector<double> naive_attention(const std::vector<double>& x,
                                    const std::vector<double>& q_src,
                                    const std::vector<double>& wq,
                                    const std::vector<double>& wk,
                                    const std::vector<double>& wv,
                                    const std::vector<double>& wp,
                                    Eigen::Index batch, Eigen::Index g,
                                    Eigen::Index s, Eigen::Index heads,
                                    bool shared_query) {
  const Eigen::Index n_e = s / heads;
  auto at = [g, s](const std::vector<double>& m, Eigen::Index b,
                   Eigen::Index r, Eigen::Index c) {
    return m[std::size_t((b * g + r) * s + c)];
  };
  std::vector<double> out(std::size_t(batch * g * s), 0.0);
  for (Eigen::Index b = 0; b < batch; ++b) {
    const Eigen::Index qb = shared_query ? 0 : b;
    std::vector<double> merged(std::size_t(g * s), 0.0);
    for (Eigen::Index h = 0; h < heads; ++h) {
      // Projections restricted to this head's columns.
      std::vector<double> q(std::size_t(g * n_e), 0.0),
          k(std::size_t(g * n_e), 0.0), v(std::size_t(g * n_e), 0.0);
      for (Eigen::Index r = 0; r < g; ++r) {
        for (Eigen::Index e = 0; e < n_e; ++e) {
          const Eigen::Index col = h * n_e + e;
          double sq = 0, sk = 0, sv = 0;
          for (Eigen::Index c = 0; c < s; ++c) {
            sq += at(q_src, qb, r, c) * wq[std::size_t(c * s + col)];
            sk += at(x, b, r, c) * wk[std::size_t(c * s + col)];
            sv += at(x, b, r, c) * wv[std::size_t(c * s + col)];
          }
          q[std::size_t(r * n_e + e)] = sq;
          k[std::size_t(r * n_e + e)] = sk;
          v[std::size_t(r * n_e + e)] = sv;
        }
      }
      for (Eigen::Index i = 0; i < g; ++i) {
        std::vector<double> weights(static_cast<std::size_t>(g));
        double denom = 0.0;
        for (Eigen::Index j = 0; j < g; ++j) {
          double dot = 0.0;
          for (Eigen::Index e = 0; e < n_e; ++e) {
            dot += q[std::size_t(i * n_e + e)] * k[std::size_t(j * n_e + e)];
          }
          weights[std::size_t(j)] = std::exp(dot / std::sqrt(double(n_e)));
          denom += weights[std::size_t(j)];
        }
        for (Eigen::Index e = 0; e < n_e; ++e) {
          double acc = 0.0;
          for (Eigen::Index j = 0; j < g; ++j) {
            acc += weights[std::size_t(j)] / denom *
                   v[std::size_t(j * n_e + e)];
          }
          merged[std::size_t(i * s + h * n_e + e)] = acc;
        }
      }
    }
    for (Eigen::Index r = 0; r < g; ++r) {
      for (Eigen::Index c = 0; c < s; ++c) {
        double acc = 0.0;
        for (Eigen::Index m = 0; m < s; ++m) {
          acc += merged[std::size_t(r * s + m)] * wp[std::size_t(m * s + c)];
        }
        out[std::size_t((b * g + r) * s + c)] = acc;
      }
    }
  }
  return out;
}

QatConfig small_config() {
  QatConfig c;
  c.n_qubits = 1;
  c.d = 2;
  c.d_g = 3;
  c.d_s = 8;
  c.d_l = 2;
  c.d_h = 4;
  c.d_rate = 2;
  c.seed = 7;
  return c;
}

}  // namespace

TEST_CASE("position encoding values") {
  Tensor pe = position_encoding(5, 6);
  CHECK(pe.shape() == Shape{5, 6});
  for (Eigen::Index i = 0; i < 3; ++i) {
    CHECK(pe.data()[std::size_t(2 * i)] == 0.0);
    CHECK(pe.data()[std::size_t(2 * i + 1)] == 1.0);
  }
  CHECK(pe.data()[6] == doctest::Approx(std::sin(1.0)).epsilon(1e-12));
  CHECK(pe.data()[6] == doctest::Approx(0.841471).epsilon(1e-6));
  for (double v : pe.data()) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
  // Column pair (2,3) at row 1 uses wavelength 10000^(2/6).
  const double arg = 1.0 / std::pow(10000.0, 2.0 / 6.0);
  CHECK(pe.data()[8] == doctest::Approx(std::sin(arg)).epsilon(1e-15));
  CHECK(pe.data()[9] == doctest::Approx(std::cos(arg)).epsilon(1e-15));
}

TEST_CASE("frequency embedding is a pure matrix product") {
  Rng rng(70);
  Tensor f = random_tensor({3, 4}, rng);
  CHECK(embed_frequencies(f, Tensor::zeros({4, 5})).data() ==
        std::vector<double>(15, 0.0));

  Tensor eye = Tensor::zeros({4, 4});
  for (int i = 0; i < 4; ++i) eye.data()[std::size_t(i * 4 + i)] = 1.0;
  CHECK(embed_frequencies(f, eye).data() == f.data());
}

TEST_CASE("operator rows flatten real then imaginary parts per element") {
  MeasurementSet ms = cube_measurement(1);
  Tensor rows = operator_rows(ms);
  CHECK(rows.shape() == Shape{3, 16});
  // First detector is the computational (z) basis: |0><0| then |1><1|.
  std::vector<double> expected{1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0};
  for (int j = 0; j < 16; ++j) {
    CHECK(rows.data()[std::size_t(j)] == doctest::Approx(expected[std::size_t(j)]).epsilon(1e-15));
  }
  // The y detector has imaginary off-diagonals: (I -+ sigma_y)/2.
  const std::vector<double>& d = rows.data();
  CHECK(d[16 + 4 + 1] == doctest::Approx(-0.5).epsilon(1e-15));  // Im <0|O|1>
  CHECK(d[16 + 4 + 2] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("attention matches the naive loop oracle") {
  Rng rng(71);
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::Index g = 1 + Eigen::Index(rng.next_u64() % 6);
    const Eigen::Index heads = 1 + Eigen::Index(rng.next_u64() % 4);
    const Eigen::Index n_e = 1 + Eigen::Index(rng.next_u64() % 4);
    const Eigen::Index s = heads * n_e;
    const Eigen::Index batch = 1 + Eigen::Index(rng.next_u64() % 3);
    const bool shared_query = trial % 3 == 0;

    Tensor x = random_tensor({batch, g, s}, rng);
    Tensor q_src =
        shared_query ? random_tensor({g, s}, rng) : random_tensor({batch, g, s}, rng);
    AttentionWeights w{random_tensor({s, s}, rng), random_tensor({s, s}, rng),
                       random_tensor({s, s}, rng), random_tensor({s, s}, rng)};

    Tensor got = attention_block(x, q_src, w, heads);
    CHECK(got.shape() == Shape{batch, g, s});
    std::vector<double> want = naive_attention(
        x.data(), q_src.data(), w.wq.data(), w.wk.data(), w.wv.data(),
        w.wp.data(), batch, g, s, heads, shared_query);
    double worst = 0.0;
    for (std::size_t i = 0; i < want.size(); ++i) {
      worst = std::max(worst, std::abs(got.data()[i] - want[i]));
    }
    CHECK(worst <= 1e-10);
  }
}

TEST_CASE("attention with a single row reduces to V projected") {
  Rng rng(72);
  Tensor x = random_tensor({1, 4}, rng);
  AttentionWeights w{random_tensor({4, 4}, rng), random_tensor({4, 4}, rng),
                     random_tensor({4, 4}, rng), random_tensor({4, 4}, rng)};
  Tensor got = attention_block(x, x, w, 2);
  Tensor want = ad::matmul(ad::matmul(x, w.wv), w.wp);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(got.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-13));
  }
}

TEST_CASE("attention is row-permutation equivariant") {
  Rng rng(73);
  const Eigen::Index g = 5, s = 6;
  Tensor x = random_tensor({g, s}, rng);
  AttentionWeights w{random_tensor({s, s}, rng), random_tensor({s, s}, rng),
                     random_tensor({s, s}, rng), random_tensor({s, s}, rng)};
  std::vector<Eigen::Index> perm{3, 0, 4, 1, 2};
  Tensor xp = Tensor::zeros({g, s});
  for (Eigen::Index r = 0; r < g; ++r) {
    for (Eigen::Index c = 0; c < s; ++c) {
      xp.data()[std::size_t(r * s + c)] =
          x.data()[std::size_t(perm[std::size_t(r)] * s + c)];
    }
  }
  Tensor base = attention_block(x, x, w, 2);
  Tensor permuted = attention_block(xp, xp, w, 2);
  for (Eigen::Index r = 0; r < g; ++r) {
    for (Eigen::Index c = 0; c < s; ++c) {
      CHECK(permuted.data()[std::size_t(r * s + c)] ==
            doctest::Approx(
                base.data()[std::size_t(perm[std::size_t(r)] * s + c)])
                .epsilon(1e-12));
    }
  }

  CHECK_THROWS_AS(attention_block(random_tensor({2, 6}, rng),
                                  random_tensor({2, 6}, rng), w, 4),
                  ShapeMismatch);
}

TEST_CASE("parameter count matches the closed form") {
  auto total = [](const QstModel& m) {
    Eigen::Index n = 0;
    for (const auto& p : m.params) n += p.tensor.numel();
    return n;
  };

  QatConfig def;  // n=2 cube defaults: d_l=8, d_s=32, d_h=16, d_rate=8
  QstModel qat = build_model(ModelKind::qat, def);
  CHECK(total(qat) == parameter_count(ModelKind::qat, def));
  CHECK(parameter_count(ModelKind::qat, def) == 209296);

  QatConfig desk = def;
  desk.d_l = 2;
  CHECK(total(build_model(ModelKind::qat, desk)) ==
        parameter_count(ModelKind::qat, desk));

  QatConfig srm3;
  srm3.n_qubits = 3;
  srm3.d = 8;
  srm3.d_g = 5;
  srm3.d_l = 2;
  CHECK(total(build_model(ModelKind::qat_no_oe, srm3)) ==
        parameter_count(ModelKind::qat, srm3));

  QstModel fcn = build_model(ModelKind::fcn, def);
  CHECK(total(fcn) == parameter_count(ModelKind::fcn, def));
  CHECK(parameter_count(ModelKind::fcn, def) ==
        (9 * 4 * 256 + 256) + 4 * (256 * 256 + 256) + (256 * 16 + 16));

  QatConfig bad = def;
  bad.d_s = 30;
  CHECK_THROWS_AS(build_model(ModelKind::qat, bad), ConfigError);
  QatConfig wrong_d = def;
  wrong_d.d = 5;
  CHECK_THROWS_AS(build_model(ModelKind::qat, wrong_d), ConfigError);
}

TEST_CASE("forward shape contract per qubit count") {
  Rng rng(74);
  for (int n : {1, 2, 3, 4}) {
    QatConfig c;
    c.n_qubits = n;
    c.d = Eigen::Index(1) << n;
    MeasurementSet ms = cube_measurement(n);
    c.d_g = ms.group_count();
    c.d_s = 8;
    c.d_l = 1;
    c.d_h = 2;
    c.d_rate = 2;
    c.seed = 11;
    Tensor ops = operator_rows(ms);
    Tensor freqs = random_tensor({2, c.d_g, c.d}, rng);
    for (ModelKind kind :
         {ModelKind::qat, ModelKind::qat_no_oe, ModelKind::fcn}) {
      QstModel m = build_model(kind, c);
      Tensor out = model_forward(m, freqs, ops);
      CHECK(out.shape() == Shape{2, c.d * c.d});
    }
  }
}

TEST_CASE("zero head yields zero alpha and ZeroTrace downstream") {
  QatConfig c = small_config();
  QstModel m = build_model(ModelKind::qat, c);
  for (double& v : m.param("head.w").data()) v = 0.0;
  for (double& v : m.param("head.b").data()) v = 0.0;
  MeasurementSet ms = cube_measurement(1);
  FrequencyTable f = FrequencyTable::Constant(3, 2, 0.5);
  Eigen::VectorXd alpha = predict_alpha(m, f, operator_rows(ms));
  CHECK(alpha.norm() == 0.0);
  CHECK_THROWS_AS(alpha_to_rho(alpha), ZeroTrace);
}

TEST_CASE("operator-embedding ablation decouples the measurement set") {
  QatConfig c = small_config();
  QstModel m = build_model(ModelKind::qat, c);
  MeasurementSet ms = cube_measurement(1);
  Tensor ops = operator_rows(ms);
  Rng rng(75);
  Tensor fake_ops = random_tensor(ops.shape(), rng);
  FrequencyTable f(3, 2);
  f << 0.7, 0.3, 0.5, 0.5, 0.1, 0.9;

  Eigen::VectorXd base = predict_alpha(m, f, ops);
  Eigen::VectorXd swapped = predict_alpha(m, f, fake_ops);
  CHECK((base - swapped).norm() > 1e-6);  // OE active: operators matter

  QstModel ablated = ablate_operator_embedding(m);
  CHECK(ablated.kind == ModelKind::qat_no_oe);
  CHECK(ablated.params.size() == m.params.size());
  Eigen::VectorXd a1 = predict_alpha(ablated, f, ops);
  Eigen::VectorXd a2 = predict_alpha(ablated, f, fake_ops);
  CHECK(a1 == a2);
  CHECK((base - a1).norm() > 1e-6);  // toggling the ablation changes output

  QstModel fcn = build_model(ModelKind::fcn, c);
  CHECK_THROWS_AS(ablate_operator_embedding(fcn), ConfigError);
}

TEST_CASE("without position encoding features are permutation covariant") {
  QatConfig c = small_config();
  QstModel m = build_model(ModelKind::qat, c);
  m.use_position_encoding = false;
  MeasurementSet ms = cube_measurement(1);
  Tensor ops = operator_rows(ms);
  Rng rng(76);
  Tensor freqs = random_tensor({1, 3, 2}, rng);

  std::vector<Eigen::Index> perm{2, 0, 1};
  Tensor freqs_p = Tensor::zeros({1, 3, 2});
  Tensor ops_p = Tensor::zeros(ops.shape());
  const Eigen::Index row_len = ops.shape()[1];
  for (Eigen::Index r = 0; r < 3; ++r) {
    for (Eigen::Index j = 0; j < 2; ++j) {
      freqs_p.data()[std::size_t(r * 2 + j)] =
          freqs.data()[std::size_t(perm[std::size_t(r)] * 2 + j)];
    }
    for (Eigen::Index j = 0; j < row_len; ++j) {
      ops_p.data()[std::size_t(r * row_len + j)] =
          ops.data()[std::size_t(perm[std::size_t(r)] * row_len + j)];
    }
  }

  ad::NoGradGuard guard;
  Tensor base = qat_features(m, freqs, ops);
  Tensor permuted = qat_features(m, freqs_p, ops_p);
  for (Eigen::Index r = 0; r < 3; ++r) {
    for (Eigen::Index col = 0; col < c.d_s; ++col) {
      CHECK(permuted.data()[std::size_t(r * c.d_s + col)] ==
            doctest::Approx(base.data()[std::size_t(
                                perm[std::size_t(r)] * c.d_s + col)])
                .epsilon(1e-11));
    }
  }
}

TEST_CASE("forward is deterministic and init is seed-reproducible") {
  QatConfig c = small_config();
  QstModel m1 = build_model(ModelKind::qat, c);
  QstModel m2 = build_model(ModelKind::qat, c);
  REQUIRE(m1.params.size() == m2.params.size());
  for (std::size_t i = 0; i < m1.params.size(); ++i) {
    CHECK(m1.params[i].name == m2.params[i].name);
    CHECK(m1.params[i].tensor.data() == m2.params[i].tensor.data());
  }
  c.seed = 8;
  QstModel m3 = build_model(ModelKind::qat, c);
  CHECK(m3.param("embed.freq").data() != m1.param("embed.freq").data());

  MeasurementSet ms = cube_measurement(1);
  FrequencyTable f(3, 2);
  f << 0.7, 0.3, 0.5, 0.5, 0.1, 0.9;
  Eigen::VectorXd o1 = predict_alpha(m1, f, operator_rows(ms));
  Eigen::VectorXd o2 = predict_alpha(m1, f, operator_rows(ms));
  CHECK(o1 == o2);
}

TEST_CASE("end-to-end gradients match finite differences") {
  QatConfig c = small_config();
  MeasurementSet ms = cube_measurement(1);
  Tensor ops = operator_rows(ms);
  Rng rng(77);
  Tensor freqs = random_tensor({3, c.d_g, c.d}, rng);
  Tensor targets = random_tensor({3, c.d * c.d}, rng);

  for (ModelKind kind :
       {ModelKind::qat, ModelKind::qat_no_oe, ModelKind::fcn}) {
    QstModel model = build_model(kind, c);
    ad::ScalarFn fn = [&](std::vector<Tensor>&) {
      Tensor alpha_hat = model_forward(model, freqs, ops);
      return integrated_loss(alpha_hat, targets, LossConfig{0.09});
    };
    // Five random parameters, a few elements each; handles share storage
    // with the model so the perturbations reach the forward pass.
    std::vector<Tensor> picked;
    for (int k = 0; k < 5; ++k) {
      picked.push_back(
          model.params[rng.next_u64() % model.params.size()].tensor);
    }
    double err = ad::gradient_check_sampled(fn, picked, 4, rng);
    INFO(to_string(kind));
    CHECK(err <= 1e-4);
  }
}

TEST_CASE("model config json round trip") {
  QatConfig c = small_config();
  QstModel m = build_model(ModelKind::qat_no_oe, c);
  QstModel re = model_from_config_json(model_config_json(m));
  CHECK(re.kind == ModelKind::qat_no_oe);
  CHECK(re.config.d_s == c.d_s);
  CHECK(re.config.seed == c.seed);
  REQUIRE(re.params.size() == m.params.size());
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    CHECK(re.params[i].name == m.params[i].name);
    CHECK(re.params[i].tensor.data() == m.params[i].tensor.data());
  }
  CHECK_THROWS_AS(model_from_config_json("{not json"), FormatError);
  CHECK_THROWS_AS(model_from_config_json("{\"kind\":\"qat\"}"), FormatError);
}
