#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qst/autodiff.hpp"
#include "qst/povm.hpp"

namespace qst {

enum class ModelKind { qat, qat_no_oe, fcn };

ModelKind model_kind_from_string(const std::string& s);
std::string to_string(ModelKind k);

/// Architecture hyperparameters. d and d_g come from the dataset; the rest
/// select the transformer geometry. d_s must be divisible by d_h (per-head
/// width n_e = d_s / d_h); build_model rejects the config otherwise.
struct QatConfig {
  int n_qubits = 2;
  Eigen::Index d = 4;       // Hilbert space dimension, 2^n_qubits
  Eigen::Index d_g = 9;     // detector count
  Eigen::Index d_s = 32;    // embedding width
  Eigen::Index d_l = 8;     // transformer layers
  Eigen::Index d_h = 16;    // attention heads
  Eigen::Index d_rate = 8;  // MLP expansion factor
  std::uint64_t seed = 0;
};

/// One trainable model, QAT or FCN. Parameters are held in a fixed
/// registration order (stable across runs, used by checkpoints). The
/// qat_no_oe kind keeps the operator-embedding weight allocated so
/// checkpoints stay shape-compatible; its cross-attention queries the
/// main stream instead.
struct QstModel {
  ModelKind kind = ModelKind::qat;
  QatConfig config;
  // Disabled only by tests probing permutation covariance.
  bool use_position_encoding = true;
  std::vector<ad::Parameter> params;

  ad::Tensor& param(const std::string& name);
  const ad::Tensor& param(const std::string& name) const;
};

/// Builds a model with all weights initialized uniform(-b, +b), b =
/// sqrt(1/fan_in), from Rng(config.seed); norm gains start at 1 and norm
/// biases at 0. FCN ignores the transformer fields of the config.
QstModel build_model(ModelKind kind, const QatConfig& config);

/// Closed-form trainable-parameter count:
///   qat: d*d_s + 2d^3*d_s
///        + d_l*(6 d_s + 8 d_s^2 + 2 d_rate d_s^2 + d_rate d_s + d_s)
///        + d_g*d_s*d^2 + d^2
///   fcn: (d_g*d*256 + 256) + 4*(256^2 + 256) + (256*d^2 + d^2)
Eigen::Index parameter_count(ModelKind kind, const QatConfig& config);

/// Flattened detector rows: one row per detector, its d operators
/// concatenated, each contributing vec(Re) row-major then vec(Im)
/// row-major. Shape (d_g, 2 d^3), untracked.
ad::Tensor operator_rows(const MeasurementSet& ms);

/// F = f * theta_f (no bias). freqs (d_g, d) or batched (B, d_g, d).
ad::Tensor embed_frequencies(const ad::Tensor& freqs,
                             const ad::Tensor& theta_f);

/// Fixed sinusoidal table, shape (d_g, d_s), 0-based row index eta:
///   PE(eta, 2i)   = sin(eta / 10000^(2i/d_s))
///   PE(eta, 2i+1) = cos(eta / 10000^(2i/d_s))
ad::Tensor position_encoding(Eigen::Index d_g, Eigen::Index d_s);

/// O' = O * theta_m (no bias), O from operator_rows.
ad::Tensor embed_operators(const ad::Tensor& op_rows,
                           const ad::Tensor& theta_m);

struct AttentionWeights {
  ad::Tensor wq, wk, wv, wp;  // each (d_s, d_s); heads are column slices
};

/// Multi-head scaled dot-product attention. Per head of width n_e =
/// d_s/n_heads: Q = q_src*Wq, K = x*Wk, V = x*Wv (column slice h), head =
/// softmax(Q K^T / sqrt(n_e)) V; heads concatenated then projected by Wp.
/// Self-attention passes q_src = x. x (…, d_g, d_s); q_src may be 2D while
/// x is batched.
ad::Tensor attention_block(const ad::Tensor& x, const ad::Tensor& q_src,
                           const AttentionWeights& w, Eigen::Index n_heads);

/// Pre-head representation, shape (B, d_g, d_s): embedding + position
/// encoding, then d_l pre-norm residual layers
///   x += CrossAttn(Norm(x), q_src = O')
///   x += SelfAttn(Norm(x))
///   x += MLP(Norm(x))        MLP = Linear(d_s -> d_s*d_rate), GELU, Linear.
/// QAT kinds only.
ad::Tensor qat_features(const QstModel& m, const ad::Tensor& freqs,
                        const ad::Tensor& op_rows);

/// Full forward pass to predicted alpha-vectors, shape (B, d^2).
/// freqs is (B, d_g, d); op_rows from operator_rows (ignored by fcn and
/// unused by qat_no_oe). QAT head flattens (d_g, d_s) and applies one
/// linear layer with bias; FCN is 5x(Linear 256 + ReLU) then Linear.
ad::Tensor model_forward(const QstModel& m, const ad::Tensor& freqs,
                         const ad::Tensor& op_rows);

/// Single-sample, tape-free convenience: frequencies in, alpha out.
Eigen::VectorXd predict_alpha(const QstModel& m, const FrequencyTable& f,
                              const ad::Tensor& op_rows);

/// Same model with cross-attention re-pointed at the main stream (q_src =
/// x). Parameter shapes unchanged, so checkpoints remain loadable.
QstModel ablate_operator_embedding(QstModel m);

/// Model identity as JSON (kind + config), embedded into checkpoint
/// manifests and restored by model_from_config_json.
std::string model_config_json(const QstModel& m);
QstModel model_from_config_json(const std::string& config_json);

}  // namespace qst
