#include "qst/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "qst/loss.hpp"
#include "qst/model.hpp"

namespace qst::ad {

namespace {

double run_check(const ScalarFn& fn, std::vector<Tensor>& inputs,
                 const std::vector<std::vector<Eigen::Index>>& elems,
                 double h, double floor) {
  for (Tensor& t : inputs) t.zero_grad();
  Tensor out = fn(inputs);
  out.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (Tensor& t : inputs) {
    analytic.push_back(t.requires_grad() ? t.grad() : std::vector<double>());
  }

  double worst = 0.0;
  NoGradGuard guard;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].requires_grad()) continue;
    for (Eigen::Index j : elems[i]) {
      double& x = inputs[i].data()[std::size_t(j)];
      const double saved = x;
      x = saved + h;
      const double fp = fn(inputs).value();
      x = saved - h;
      const double fm = fn(inputs).value();
      x = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[i][std::size_t(j)];
      const double rel = std::abs(a - numeric) /
                         std::max({floor, std::abs(a), std::abs(numeric)});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace

double gradient_check(const ScalarFn& fn, std::vector<Tensor> inputs,
                      double h, double floor) {
  std::vector<std::vector<Eigen::Index>> elems(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].requires_grad()) continue;
    elems[i].resize(std::size_t(inputs[i].numel()));
    for (Eigen::Index j = 0; j < inputs[i].numel(); ++j) elems[i][std::size_t(j)] = j;
  }
  return run_check(fn, inputs, elems, h, floor);
}

double gradient_check_sampled(const ScalarFn& fn, std::vector<Tensor> inputs,
                              Eigen::Index max_elems, Rng& rng, double h,
                              double floor) {
  std::vector<std::vector<Eigen::Index>> elems(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].requires_grad()) continue;
    const Eigen::Index n = inputs[i].numel();
    if (n <= max_elems) {
      elems[i].resize(std::size_t(n));
      for (Eigen::Index j = 0; j < n; ++j) elems[i][std::size_t(j)] = j;
    } else {
      for (Eigen::Index k = 0; k < max_elems; ++k) {
        elems[i].push_back(Eigen::Index(rng.next_u64() % std::uint64_t(n)));
      }
    }
  }
  return run_check(fn, inputs, elems, h, floor);
}

namespace {

// [lo, hi] magnitudes with random sign; keeps data away from kinks.
Tensor signed_tensor(const Shape& shape, Rng& rng, double lo, double hi,
                     bool track = true) {
  Eigen::Index n = 1;
  for (Eigen::Index s : shape) n *= s;
  std::vector<double> data(static_cast<std::size_t>(n));
  for (double& v : data) {
    const double mag = lo + rng.uniform() * (hi - lo);
    v = (rng.next_u64() & 1) ? mag : -mag;
  }
  return Tensor::from_data(shape, std::move(data), track);
}

Tensor positive_tensor(const Shape& shape, Rng& rng, double lo, double hi,
                       bool track = true) {
  Eigen::Index n = 1;
  for (Eigen::Index s : shape) n *= s;
  std::vector<double> data(static_cast<std::size_t>(n));
  for (double& v : data) v = lo + rng.uniform() * (hi - lo);
  return Tensor::from_data(shape, std::move(data), track);
}

Eigen::Index rand_dim(Rng& rng, Eigen::Index hi = 4) {
  return 1 + Eigen::Index(rng.next_u64() % std::uint64_t(hi));
}

Shape rand_shape(Rng& rng, int rank) {
  Shape s;
  for (int i = 0; i < rank; ++i) s.push_back(rand_dim(rng));
  return s;
}

// Reduces an arbitrary tensor to a scalar with fixed random weights so
// every output element influences the check.
ScalarFn weighted(std::function<Tensor(std::vector<Tensor>&)> build,
                  Tensor weights) {
  return [build = std::move(build), weights](std::vector<Tensor>& in) {
    return sum(mul(build(in), weights));
  };
}

double end_to_end_check(ModelKind kind, Rng& rng) {
  QatConfig mc;
  mc.n_qubits = 1;
  mc.d = 2;
  mc.d_g = 3;
  mc.d_s = 8;
  mc.d_l = 1;
  mc.d_h = 2;
  mc.d_rate = 2;
  mc.seed = rng.next_u64();
  QstModel model = build_model(kind, mc);
  const Eigen::Index batch = 2;
  Tensor freqs = positive_tensor({batch, mc.d_g, mc.d}, rng, 0.05, 0.95, false);
  Tensor ops = signed_tensor({mc.d_g, 2 * mc.d * mc.d * mc.d}, rng, 0.1, 1.0,
                             false);
  Tensor targets = signed_tensor({batch, mc.d * mc.d}, rng, 0.2, 1.0, false);
  LossConfig lc;
  std::vector<Tensor> leaves;
  for (auto& p : model.params) leaves.push_back(p.tensor);
  ScalarFn fn = [&model, freqs, ops, targets, lc](std::vector<Tensor>&) {
    Tensor alpha_hat = model_forward(model, freqs, ops);
    return integrated_loss(alpha_hat, targets, lc);
  };
  Rng pick(rng.next_u64());
  return gradient_check_sampled(fn, leaves, 3, pick);
}

}  // namespace

std::vector<GradcheckResult> run_gradient_suite(Eigen::Index trials,
                                                std::uint64_t seed,
                                                double tolerance) {
  struct Check {
    const char* name;
    std::function<double(Rng&)> run;
  };

  auto fd = [](const ScalarFn& fn, std::vector<Tensor> inputs) {
    return gradient_check(fn, std::move(inputs));
  };

  const std::vector<Check> checks = {
      {"matmul_2d",
       [&](Rng& rng) {
         const Eigen::Index m = rand_dim(rng), k = rand_dim(rng),
                            n = rand_dim(rng);
         Tensor a = signed_tensor({m, k}, rng, 0.1, 1.5);
         Tensor b = signed_tensor({k, n}, rng, 0.1, 1.5);
         Tensor w = signed_tensor({m, n}, rng, 0.2, 1.0, false);
         return fd(weighted([](auto& in) { return matmul(in[0], in[1]); }, w),
                   {a, b});
       }},
      {"matmul_broadcast",
       [&](Rng& rng) {
         const Eigen::Index b = rand_dim(rng), m = rand_dim(rng),
                            k = rand_dim(rng), n = rand_dim(rng);
         Tensor x = signed_tensor({b, m, k}, rng, 0.1, 1.5);
         Tensor y = signed_tensor({k, n}, rng, 0.1, 1.5);
         Tensor w = signed_tensor({b, m, n}, rng, 0.2, 1.0, false);
         return fd(weighted([](auto& in) { return matmul(in[0], in[1]); }, w),
                   {x, y});
       }},
      {"matmul_3d",
       [&](Rng& rng) {
         const Eigen::Index b = rand_dim(rng), m = rand_dim(rng),
                            k = rand_dim(rng), n = rand_dim(rng);
         Tensor x = signed_tensor({b, m, k}, rng, 0.1, 1.5);
         Tensor y = signed_tensor({b, k, n}, rng, 0.1, 1.5);
         Tensor w = signed_tensor({b, m, n}, rng, 0.2, 1.0, false);
         return fd(weighted([](auto& in) { return matmul(in[0], in[1]); }, w),
                   {x, y});
       }},
      {"add_same",
       [&](Rng& rng) {
         Shape s = rand_shape(rng, 2);
         Tensor a = signed_tensor(s, rng, 0.1, 1.5);
         Tensor b = signed_tensor(s, rng, 0.1, 1.5);
         Tensor w = signed_tensor(s, rng, 0.2, 1.0, false);
         return fd(weighted([](auto& in) { return add(in[0], in[1]); }, w),
                   {a, b});
       }},
      {"add_broadcast",
       [&](Rng& rng) {
         const Eigen::Index b = rand_dim(rng), m = rand_dim(rng),
                            n = rand_dim(rng);
         Tensor x = signed_tensor({b, m, n}, rng, 0.1, 1.5);
         Tensor bias = signed_tensor({n}, rng, 0.1, 1.5);
         Tensor w = signed_tensor({b, m, n}, rng, 0.2, 1.0, false);
         return fd(weighted([](auto& in) { return add(in[0], in[1]); }, w),
                   {x, bias});
       }},
      {"sub",
       [&](Rng& rng) {
         Shape s = rand_shape(rng, 2);
         Tensor a = signed_tensor(s, rng, 0.1, 1.5);
         Tensor b = signed_tensor(s, rng, 0.1, 1.5);
         Tensor w = signed_tensor(s, rng, 0.2, 1.0, false);
         return fd(weighted([](auto& in) { return sub(in[0], in[1]); }, w),
                   {a, b});
       }},
      {"mul",
       [&](Rng& rng) {
         Shape s = rand_shape(rng, 3);
         Tensor a = signed_tensor(s, rng, 0.1, 1.5);
         Tensor b = signed_tensor(s, rng, 0.1, 1.5);
         Tensor w = signed_tensor(s, rng, 0.2, 1.0, false);
         return fd(weighted([](auto& in) { return mul(in[0], in[1]); }, w),
                   {a, b});
       }},
      {"div",
       [&](Rng& rng) {
         Shape s = rand_shape(rng, 2);
         Tensor a = signed_tensor(s, rng, 0.1, 1.5);
         Tensor b = positive_tensor(s, rng, 0.5, 2.0);
         Tensor w = signed_tensor(s, rng, 0.2, 1.0, false);
         return fd(weighted([](auto& in) { return div(in[0], in[1]); }, w),
                   {a, b});
       }},
      {"scale",
       [&](Rng& rng) {
         Shape s = rand_shape(rng, 2);
         const double c = -2.0 + 4.0 * rng.uniform();
         Tensor a = signed_tensor(s, rng, 0.1, 1.5);
         Tensor w = signed_tensor(s, rng, 0.2, 1.0, false);
         return fd(weighted([c](auto& in) { return scale(in[0], c); }, w),
                   {a});
       }},
      {"add_const",
       [&](Rng& rng) {
         Shape s = rand_shape(rng, 2);
         const double c = -1.0 + 2.0 * rng.uniform();
         Tensor a = signed_tensor(s, rng, 0.1, 1.5);
         Tensor w = signed_tensor(s, rng, 0.2, 1.0, false);
         return fd(weighted([c](auto& in) { return add_const(in[0], c); }, w),
                   {a});
       }},
      {"transpose_last2",
       [&](Rng& rng) {
         const Eigen::Index b = rand_dim(rng), m = rand_dim(rng),
                            n = rand_dim(rng);
         Tensor a = signed_tensor({b, m, n}, rng, 0.1, 1.5);
         Tensor w = signed_tensor({b, n, m}, rng, 0.2, 1.0, false);
         return fd(
             weighted([](auto& in) { return transpose_last2(in[0]); }, w),
             {a});
       }},
      {"reshape",
       [&](Rng& rng) {
         const Eigen::Index m = rand_dim(rng), n = rand_dim(rng);
         Tensor a = signed_tensor({m, n}, rng, 0.1, 1.5);
         Tensor w = signed_tensor({m * n}, rng, 0.2, 1.0, false);
         return fd(weighted(
                       [m, n](auto& in) {
                         return reshape(in[0], {m * n});
                       },
                       w),
                   {a});
       }},
      {"concat_last",
       [&](Rng& rng) {
         const Eigen::Index m = rand_dim(rng), n1 = rand_dim(rng),
                            n2 = rand_dim(rng);
         Tensor a = signed_tensor({m, n1}, rng, 0.1, 1.5);
         Tensor b = signed_tensor({m, n2}, rng, 0.1, 1.5);
         Tensor w = signed_tensor({m, n1 + n2}, rng, 0.2, 1.0, false);
         return fd(weighted(
                       [](auto& in) {
                         return concat_last({in[0], in[1]});
                       },
                       w),
                   {a, b});
       }},
      {"slice_last",
       [&](Rng& rng) {
         const Eigen::Index m = rand_dim(rng);
         const Eigen::Index n = 2 + Eigen::Index(rng.next_u64() % 3);
         const Eigen::Index start = Eigen::Index(rng.next_u64() % (n - 1));
         const Eigen::Index len =
             1 + Eigen::Index(rng.next_u64() % std::uint64_t(n - start - 1) );
         Tensor a = signed_tensor({m, n}, rng, 0.1, 1.5);
         Tensor w = signed_tensor({m, len}, rng, 0.2, 1.0, false);
         return fd(weighted(
                       [start, len](auto& in) {
                         return slice_last(in[0], start, len);
                       },
                       w),
                   {a});
       }},
      {"sum",
       [&](Rng& rng) {
         Tensor a = signed_tensor(rand_shape(rng, 2), rng, 0.1, 1.5);
         return fd([](auto& in) { return sum(in[0]); }, {a});
       }},
      {"mean",
       [&](Rng& rng) {
         Tensor a = signed_tensor(rand_shape(rng, 3), rng, 0.1, 1.5);
         return fd([](auto& in) { return mean(in[0]); }, {a});
       }},
      {"sum_last",
       [&](Rng& rng) {
         const Eigen::Index m = rand_dim(rng), n = rand_dim(rng);
         Tensor a = signed_tensor({m, n}, rng, 0.1, 1.5);
         Tensor w = signed_tensor({m}, rng, 0.2, 1.0, false);
         return fd(weighted([](auto& in) { return sum_last(in[0]); }, w),
                   {a});
       }},
      {"softmax_last",
       [&](Rng& rng) {
         const Eigen::Index m = rand_dim(rng);
         const Eigen::Index n = 2 + Eigen::Index(rng.next_u64() % 3);
         Tensor a = signed_tensor({m, n}, rng, 0.1, 2.0);
         Tensor w = signed_tensor({m, n}, rng, 0.2, 1.0, false);
         return fd(weighted([](auto& in) { return softmax_last(in[0]); }, w),
                   {a});
       }},
      {"layer_norm",
       [&](Rng& rng) {
         const Eigen::Index m = rand_dim(rng);
         const Eigen::Index n = 2 + Eigen::Index(rng.next_u64() % 3);
         Tensor x = signed_tensor({m, n}, rng, 0.1, 1.5);
         Tensor gain = signed_tensor({n}, rng, 0.5, 1.5);
         Tensor bias = signed_tensor({n}, rng, 0.1, 0.5);
         Tensor w = signed_tensor({m, n}, rng, 0.2, 1.0, false);
         return fd(weighted(
                       [](auto& in) {
                         return layer_norm(in[0], in[1], in[2]);
                       },
                       w),
                   {x, gain, bias});
       }},
      {"gelu",
       [&](Rng& rng) {
         Shape s = rand_shape(rng, 2);
         Tensor a = signed_tensor(s, rng, 0.05, 2.0);
         Tensor w = signed_tensor(s, rng, 0.2, 1.0, false);
         return fd(weighted([](auto& in) { return gelu(in[0]); }, w), {a});
       }},
      {"relu",
       [&](Rng& rng) {
         Shape s = rand_shape(rng, 2);
         Tensor a = signed_tensor(s, rng, 0.2, 2.0);
         Tensor w = signed_tensor(s, rng, 0.2, 1.0, false);
         return fd(weighted([](auto& in) { return relu(in[0]); }, w), {a});
       }},
      {"sqrt_elem",
       [&](Rng& rng) {
         Shape s = rand_shape(rng, 2);
         Tensor a = positive_tensor(s, rng, 0.3, 2.0);
         Tensor w = signed_tensor(s, rng, 0.2, 1.0, false);
         return fd(weighted([](auto& in) { return sqrt_elem(in[0]); }, w),
                   {a});
       }},
      {"max_const",
       [&](Rng& rng) {
         Shape s = rand_shape(rng, 2);
         Tensor a = signed_tensor(s, rng, 0.2, 2.0);
         Tensor w = signed_tensor(s, rng, 0.2, 1.0, false);
         return fd(weighted([](auto& in) { return max_const(in[0], 0.0); }, w),
                   {a});
       }},
      {"mse_loss",
       [&](Rng& rng) {
         const Eigen::Index b = rand_dim(rng), n = 2 + rand_dim(rng);
         Tensor h = signed_tensor({b, n}, rng, 0.2, 1.5);
         Tensor t = signed_tensor({b, n}, rng, 0.2, 1.5, false);
         return fd([t](auto& in) { return mse_distance(in[0], t); }, {h});
       }},
      {"bures_loss",
       [&](Rng& rng) {
         const Eigen::Index b = rand_dim(rng), n = 2 + rand_dim(rng);
         Tensor h = signed_tensor({b, n}, rng, 0.2, 1.5);
         Tensor t = signed_tensor({b, n}, rng, 0.2, 1.5, false);
         return fd([t](auto& in) { return bures_approx(in[0], t); }, {h});
       }},
      {"qat_end_to_end",
       [&](Rng& rng) { return end_to_end_check(ModelKind::qat, rng); }},
      {"qat_no_oe_end_to_end",
       [&](Rng& rng) { return end_to_end_check(ModelKind::qat_no_oe, rng); }},
      {"fcn_end_to_end",
       [&](Rng& rng) { return end_to_end_check(ModelKind::fcn, rng); }},
  };

  std::vector<GradcheckResult> results;
  std::uint64_t stream = seed;
  for (const Check& check : checks) {
    Rng rng(stream++ * 0x9e3779b97f4a7c15ULL + seed);
    double worst = 0.0;
    for (Eigen::Index t = 0; t < trials; ++t) {
      worst = std::max(worst, check.run(rng));
    }
    results.push_back({check.name, worst, worst <= tolerance});
  }
  return results;
}

}  // namespace qst::ad
