#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "qst/autodiff.hpp"

namespace qst::ad {

/// Per-parameter first/second moment buffers plus the shared step count.
/// Buffers are laid out in the parameter-list order they were built with.
struct AdamState {
  std::int64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  static AdamState for_params(const std::vector<Parameter>& params);
  bool matches(const std::vector<Parameter>& params) const;
};

/// Standard Adam with bias correction:
///   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
///   p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
/// Parameters without an allocated gradient are treated as zero-gradient.
void adam_step(std::vector<Parameter>& params, AdamState& state, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

enum class ScheduleKind { cosine, step };

ScheduleKind schedule_kind_from_string(const std::string& s);
std::string to_string(ScheduleKind k);

/// Warmup then decay, in whatever unit the caller measures progress
/// (epochs here). Linear ramp 0 -> base_lr across [0, warmup]; after it,
/// with t = (step - warmup) / (total - warmup):
///   cosine: base_lr * (1 + cos(pi t)) / 2   (reaches 0 at the final step)
///   step:   base_lr * 0.1^(t >= 0.5) * 0.1^(t >= 0.75)
double lr_schedule(std::int64_t step, std::int64_t total_steps,
                   double base_lr, std::int64_t warmup_steps,
                   ScheduleKind kind = ScheduleKind::cosine);

/// Checkpoint directory: manifest.json (format_version, parameter names and
/// shapes, optimizer-state presence and step, caller-supplied config block)
/// + params.f64 (values concatenated in manifest order) + adam_state.f64
/// (all first moments, then all second moments) when present. All arrays
/// little-endian float64 with CRC-64 checksums in the manifest.
void save_checkpoint(const std::filesystem::path& dir,
                     const std::vector<Parameter>& params,
                     const std::string& config_json,
                     const AdamState* adam = nullptr);

struct Checkpoint {
  std::vector<std::string> names;
  std::vector<Shape> shapes;
  std::vector<std::vector<double>> values;
  std::string config_json;
  bool has_adam = false;
  AdamState adam;
};

Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// Copies checkpoint values into params; names and shapes must match
/// exactly (ShapeMismatch otherwise).
void restore_parameters(const Checkpoint& ckpt,
                        std::vector<Parameter>& params);

}  // namespace qst::ad
