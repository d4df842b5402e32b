#include "qst/model.hpp"

#include <cmath>
#include <utility>

#include "json.hpp"
#include "qst/errors.hpp"
#include "qst/rng.hpp"

namespace qst {

using ad::Shape;
using ad::Tensor;
using json = nlohmann::json;

ModelKind model_kind_from_string(const std::string& s) {
  if (s == "qat") return ModelKind::qat;
  if (s == "qat-no-oe" || s == "qat_no_oe") return ModelKind::qat_no_oe;
  if (s == "fcn") return ModelKind::fcn;
  throw ConfigError("unknown model kind: " + s);
}

std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::qat: return "qat";
    case ModelKind::qat_no_oe: return "qat-no-oe";
    default: return "fcn";
  }
}

Tensor& QstModel::param(const std::string& name) {
  for (auto& p : params) {
    if (p.name == name) return p.tensor;
  }
  throw ConfigError("model has no parameter named " + name);
}

const Tensor& QstModel::param(const std::string& name) const {
  return const_cast<QstModel*>(this)->param(name);
}

namespace {

constexpr Eigen::Index kFcnWidth = 256;
constexpr int kFcnHiddenLayers = 5;

void validate_config(ModelKind kind, const QatConfig& c) {
  if (c.n_qubits < 1 || c.d != (Eigen::Index(1) << c.n_qubits)) {
    throw ConfigError("model config: d must equal 2^n_qubits");
  }
  if (c.d_g < 1) throw ConfigError("model config: d_g must be positive");
  if (kind == ModelKind::fcn) return;
  if (c.d_s < 1 || c.d_l < 1 || c.d_h < 1 || c.d_rate < 1) {
    throw ConfigError("model config: transformer dims must be positive");
  }
  if (c.d_s % c.d_h != 0) {
    throw ConfigError("model config: d_s (" + std::to_string(c.d_s) +
                      ") not divisible by d_h (" + std::to_string(c.d_h) +
                      ")");
  }
}

struct ParamBuilder {
  std::vector<ad::Parameter>& params;
  Rng& rng;

  // fan_in sets the uniform(-sqrt(1/fan_in), +) init range.
  void linear(const std::string& name, Shape shape, Eigen::Index fan_in) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    const double bound = std::sqrt(1.0 / double(fan_in));
    for (double& v : t.data()) v = rng.uniform(-bound, bound);
    params.push_back({std::move(t), name});
  }

  void constant(const std::string& name, Shape shape, double value) {
    Tensor t = Tensor::full(std::move(shape), value, true);
    params.push_back({std::move(t), name});
  }

  void norm(const std::string& prefix, Eigen::Index width) {
    constant(prefix + ".gain", {width}, 1.0);
    constant(prefix + ".bias", {width}, 0.0);
  }

  void attention(const std::string& prefix, Eigen::Index d_s) {
    for (const char* w : {"wq", "wk", "wv", "wp"}) {
      linear(prefix + "." + w, {d_s, d_s}, d_s);
    }
  }
};

AttentionWeights attention_weights(const QstModel& m,
                                   const std::string& prefix) {
  return {m.param(prefix + ".wq"), m.param(prefix + ".wk"),
          m.param(prefix + ".wv"), m.param(prefix + ".wp")};
}

}  // namespace

QstModel build_model(ModelKind kind, const QatConfig& config) {
  validate_config(kind, config);
  QstModel m;
  m.kind = kind;
  m.config = config;
  Rng rng(config.seed);
  ParamBuilder b{m.params, rng};

  const Eigen::Index d = config.d, d_g = config.d_g, d_s = config.d_s;
  const Eigen::Index d2 = d * d;
  if (kind == ModelKind::fcn) {
    Eigen::Index in = d_g * d;
    for (int i = 0; i < kFcnHiddenLayers; ++i) {
      const std::string prefix = "fcn." + std::to_string(i);
      b.linear(prefix + ".w", {in, kFcnWidth}, in);
      b.linear(prefix + ".b", {kFcnWidth}, in);
      in = kFcnWidth;
    }
    b.linear("fcn.head.w", {in, d2}, in);
    b.linear("fcn.head.b", {d2}, in);
    return m;
  }

  b.linear("embed.freq", {d, d_s}, d);
  b.linear("embed.op", {2 * d * d * d, d_s}, 2 * d * d * d);
  const Eigen::Index hidden = d_s * config.d_rate;
  for (Eigen::Index l = 0; l < config.d_l; ++l) {
    const std::string prefix = "layer." + std::to_string(l);
    b.norm(prefix + ".norm1", d_s);
    b.attention(prefix + ".cross", d_s);
    b.norm(prefix + ".norm2", d_s);
    b.attention(prefix + ".self", d_s);
    b.norm(prefix + ".norm3", d_s);
    b.linear(prefix + ".mlp.w1", {d_s, hidden}, d_s);
    b.linear(prefix + ".mlp.b1", {hidden}, d_s);
    b.linear(prefix + ".mlp.w2", {hidden, d_s}, hidden);
    b.linear(prefix + ".mlp.b2", {d_s}, hidden);
  }
  b.linear("head.w", {d_g * d_s, d2}, d_g * d_s);
  b.linear("head.b", {d2}, d_g * d_s);
  return m;
}

Eigen::Index parameter_count(ModelKind kind, const QatConfig& c) {
  const Eigen::Index d = c.d, d2 = c.d * c.d;
  if (kind == ModelKind::fcn) {
    return (c.d_g * d * kFcnWidth + kFcnWidth) +
           (kFcnHiddenLayers - 1) * (kFcnWidth * kFcnWidth + kFcnWidth) +
           (kFcnWidth * d2 + d2);
  }
  const Eigen::Index s = c.d_s;
  const Eigen::Index per_layer =
      6 * s + 8 * s * s + 2 * c.d_rate * s * s + c.d_rate * s + s;
  return d * s + 2 * d * d * d * s + c.d_l * per_layer + c.d_g * s * d2 + d2;
}

Tensor operator_rows(const MeasurementSet& ms) {
  const Eigen::Index d = ms.dim();
  const Eigen::Index d_g = ms.group_count();
  const Eigen::Index row_len = 2 * d * d * d;
  std::vector<double> data;
  data.reserve(std::size_t(d_g * row_len));
  for (const Detector& det : ms.detectors) {
    if (Eigen::Index(det.elements.size()) != d) {
      throw DimensionMismatch("operator_rows: detector " + det.label +
                              " has " + std::to_string(det.elements.size()) +
                              " elements, expected " + std::to_string(d));
    }
    for (const ComplexMatrix& op : det.elements) {
      for (Eigen::Index r = 0; r < d; ++r)
        for (Eigen::Index col = 0; col < d; ++col)
          data.push_back(op(r, col).real());
      for (Eigen::Index r = 0; r < d; ++r)
        for (Eigen::Index col = 0; col < d; ++col)
          data.push_back(op(r, col).imag());
    }
  }
  return Tensor::from_data({d_g, row_len}, std::move(data));
}

Tensor embed_frequencies(const Tensor& freqs, const Tensor& theta_f) {
  return ad::matmul(freqs, theta_f);
}

Tensor position_encoding(Eigen::Index d_g, Eigen::Index d_s) {
  std::vector<double> data(static_cast<std::size_t>(d_g * d_s));
  for (Eigen::Index eta = 0; eta < d_g; ++eta) {
    for (Eigen::Index j = 0; j < d_s; ++j) {
      const Eigen::Index i = j / 2;
      const double arg =
          double(eta) / std::pow(10000.0, double(2 * i) / double(d_s));
      data[std::size_t(eta * d_s + j)] =
          (j % 2 == 0) ? std::sin(arg) : std::cos(arg);
    }
  }
  return Tensor::from_data({d_g, d_s}, std::move(data));
}

Tensor embed_operators(const Tensor& op_rows, const Tensor& theta_m) {
  return ad::matmul(op_rows, theta_m);
}

Tensor attention_block(const Tensor& x, const Tensor& q_src,
                       const AttentionWeights& w, Eigen::Index n_heads) {
  const Eigen::Index d_s = x.shape().back();
  if (n_heads < 1 || d_s % n_heads != 0) {
    throw ShapeMismatch("attention_block: width " + std::to_string(d_s) +
                        " not divisible into " + std::to_string(n_heads) +
                        " heads");
  }
  const Eigen::Index n_e = d_s / n_heads;
  Tensor q_all = ad::matmul(q_src, w.wq);
  Tensor k_all = ad::matmul(x, w.wk);
  Tensor v_all = ad::matmul(x, w.wv);
  const double inv_scale = 1.0 / std::sqrt(double(n_e));
  std::vector<Tensor> heads;
  heads.reserve(std::size_t(n_heads));
  for (Eigen::Index h = 0; h < n_heads; ++h) {
    Tensor q = ad::slice_last(q_all, h * n_e, n_e);
    Tensor k = ad::slice_last(k_all, h * n_e, n_e);
    Tensor v = ad::slice_last(v_all, h * n_e, n_e);
    Tensor scores = ad::scale(ad::matmul(q, ad::transpose_last2(k)), inv_scale);
    heads.push_back(ad::matmul(ad::softmax_last(scores), v));
  }
  return ad::matmul(ad::concat_last(heads), w.wp);
}

namespace {

Tensor mlp_block(const QstModel& m, const std::string& prefix,
                 const Tensor& x) {
  Tensor h = ad::add(ad::matmul(x, m.param(prefix + ".w1")),
                     m.param(prefix + ".b1"));
  h = ad::gelu(h);
  return ad::add(ad::matmul(h, m.param(prefix + ".w2")),
                 m.param(prefix + ".b2"));
}

}  // namespace

Tensor qat_features(const QstModel& m, const Tensor& freqs,
                    const Tensor& op_rows) {
  if (m.kind == ModelKind::fcn) {
    throw ConfigError("qat_features: fcn model has no attention stream");
  }
  const QatConfig& c = m.config;
  Tensor x = embed_frequencies(freqs, m.param("embed.freq"));
  if (m.use_position_encoding) {
    x = ad::add(x, position_encoding(c.d_g, c.d_s));
  }
  Tensor op_embed;
  if (m.kind == ModelKind::qat) {
    if (!op_rows.defined()) {
      throw ShapeMismatch("qat_features: operator rows required");
    }
    op_embed = embed_operators(op_rows, m.param("embed.op"));
  }
  for (Eigen::Index l = 0; l < c.d_l; ++l) {
    const std::string prefix = "layer." + std::to_string(l);
    Tensor normed = ad::layer_norm(x, m.param(prefix + ".norm1.gain"),
                                   m.param(prefix + ".norm1.bias"));
    const Tensor& q_src = m.kind == ModelKind::qat ? op_embed : normed;
    x = ad::add(x, attention_block(normed, q_src,
                                   attention_weights(m, prefix + ".cross"),
                                   c.d_h));
    normed = ad::layer_norm(x, m.param(prefix + ".norm2.gain"),
                            m.param(prefix + ".norm2.bias"));
    x = ad::add(x, attention_block(normed, normed,
                                   attention_weights(m, prefix + ".self"),
                                   c.d_h));
    normed = ad::layer_norm(x, m.param(prefix + ".norm3.gain"),
                            m.param(prefix + ".norm3.bias"));
    x = ad::add(x, mlp_block(m, prefix + ".mlp", normed));
  }
  return x;
}

Tensor model_forward(const QstModel& m, const Tensor& freqs,
                     const Tensor& op_rows) {
  const QatConfig& c = m.config;
  Tensor input = freqs;
  if (input.ndim() == 2) input = ad::reshape(input, {1, c.d_g, c.d});
  if (input.ndim() != 3 || input.dim(1) != c.d_g || input.dim(2) != c.d) {
    throw ShapeMismatch("model_forward: frequencies shaped " +
                        ad::shape_str(freqs.shape()) + ", config wants (" +
                        std::to_string(c.d_g) + "," + std::to_string(c.d) +
                        ")");
  }
  const Eigen::Index batch = input.dim(0);
  if (m.kind == ModelKind::fcn) {
    Tensor x = ad::reshape(input, {batch, c.d_g * c.d});
    for (int i = 0; i < kFcnHiddenLayers; ++i) {
      const std::string prefix = "fcn." + std::to_string(i);
      x = ad::relu(ad::add(ad::matmul(x, m.param(prefix + ".w")),
                           m.param(prefix + ".b")));
    }
    return ad::add(ad::matmul(x, m.param("fcn.head.w")),
                   m.param("fcn.head.b"));
  }
  Tensor feats = qat_features(m, input, op_rows);
  Tensor flat = ad::reshape(feats, {batch, c.d_g * c.d_s});
  return ad::add(ad::matmul(flat, m.param("head.w")), m.param("head.b"));
}

Eigen::VectorXd predict_alpha(const QstModel& m, const FrequencyTable& f,
                              const ad::Tensor& op_rows) {
  ad::NoGradGuard guard;
  const QatConfig& c = m.config;
  if (f.rows() != c.d_g || f.cols() != c.d) {
    throw ShapeMismatch("predict_alpha: frequency table is " +
                        std::to_string(f.rows()) + "x" +
                        std::to_string(f.cols()));
  }
  std::vector<double> data(static_cast<std::size_t>(c.d_g * c.d));
  for (Eigen::Index r = 0; r < c.d_g; ++r)
    for (Eigen::Index col = 0; col < c.d; ++col)
      data[std::size_t(r * c.d + col)] = f(r, col);
  Tensor out = model_forward(
      m, Tensor::from_data({1, c.d_g, c.d}, std::move(data)), op_rows);
  return Eigen::Map<const Eigen::VectorXd>(out.data().data(),
                                           Eigen::Index(out.data().size()));
}

QstModel ablate_operator_embedding(QstModel m) {
  if (m.kind == ModelKind::fcn) {
    throw ConfigError("ablate_operator_embedding: fcn has none");
  }
  m.kind = ModelKind::qat_no_oe;
  return m;
}

std::string model_config_json(const QstModel& m) {
  json j;
  j["kind"] = to_string(m.kind);
  j["n_qubits"] = m.config.n_qubits;
  j["d"] = m.config.d;
  j["d_g"] = m.config.d_g;
  j["d_s"] = m.config.d_s;
  j["d_l"] = m.config.d_l;
  j["d_h"] = m.config.d_h;
  j["d_rate"] = m.config.d_rate;
  j["seed"] = m.config.seed;
  return j.dump();
}

QstModel model_from_config_json(const std::string& config_json) {
  json j;
  try {
    j = json::parse(config_json);
  } catch (const json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
  try {
    QatConfig c;
    ModelKind kind = model_kind_from_string(j.at("kind").get<std::string>());
    c.n_qubits = j.at("n_qubits").get<int>();
    c.d = j.at("d").get<Eigen::Index>();
    c.d_g = j.at("d_g").get<Eigen::Index>();
    c.d_s = j.at("d_s").get<Eigen::Index>();
    c.d_l = j.at("d_l").get<Eigen::Index>();
    c.d_h = j.at("d_h").get<Eigen::Index>();
    c.d_rate = j.at("d_rate").get<Eigen::Index>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return build_model(kind, c);
  } catch (const json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
}

}  // namespace qst
