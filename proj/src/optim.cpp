#include "qst/optim.hpp"

#include <cmath>

#include "json.hpp"
#include "qst/errors.hpp"
#include "qst/io.hpp"

namespace qst::ad {

using nlohmann::json;

AdamState AdamState::for_params(const std::vector<Parameter>& params) {
  AdamState state;
  state.m.reserve(params.size());
  state.v.reserve(params.size());
  for (const Parameter& p : params) {
    state.m.emplace_back(std::size_t(p.tensor.numel()), 0.0);
    state.v.emplace_back(std::size_t(p.tensor.numel()), 0.0);
  }
  return state;
}

bool AdamState::matches(const std::vector<Parameter>& params) const {
  if (m.size() != params.size() || v.size() != params.size()) return false;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (Eigen::Index(m[i].size()) != params[i].tensor.numel()) return false;
    if (Eigen::Index(v[i].size()) != params[i].tensor.numel()) return false;
  }
  return true;
}

void adam_step(std::vector<Parameter>& params, AdamState& state, double lr,
               double beta1, double beta2, double eps) {
  if (!state.matches(params)) {
    throw ShapeMismatch("adam state does not match the parameter list");
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(beta2, double(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& t = params[i].tensor;
    std::vector<double>& values = t.data();
    std::vector<double>& m = state.m[i];
    std::vector<double>& v = state.v[i];
    const bool has_grad = t.has_grad();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = has_grad ? t.grad()[j] : 0.0;
      m[j] = beta1 * m[j] + (1.0 - beta1) * g;
      v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
      values[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps);
    }
  }
}

ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "cosine") return ScheduleKind::cosine;
  if (s == "step") return ScheduleKind::step;
  throw ConfigError("unknown schedule kind: " + s);
}

std::string to_string(ScheduleKind k) {
  return k == ScheduleKind::cosine ? "cosine" : "step";
}

double lr_schedule(std::int64_t step, std::int64_t total_steps,
                   double base_lr, std::int64_t warmup_steps,
                   ScheduleKind kind) {
  if (total_steps < 1 || warmup_steps < 0 || warmup_steps > total_steps) {
    throw ConfigError("lr_schedule: bad step bounds");
  }
  if (step < 0) step = 0;
  if (step > total_steps) step = total_steps;
  if (warmup_steps > 0 && step <= warmup_steps) {
    return base_lr * double(step) / double(warmup_steps);
  }
  const double span = double(total_steps - warmup_steps);
  const double t = span > 0.0 ? double(step - warmup_steps) / span : 1.0;
  if (kind == ScheduleKind::cosine) {
    return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
  }
  double lr = base_lr;
  if (t >= 0.5) lr *= 0.1;
  if (t >= 0.75) lr *= 0.1;
  return lr;
}

void save_checkpoint(const std::filesystem::path& dir,
                     const std::vector<Parameter>& params,
                     const std::string& config_json, const AdamState* adam) {
  std::filesystem::create_directories(dir);
  std::vector<double> values;
  json names = json::array();
  json shapes = json::array();
  for (const Parameter& p : params) {
    names.push_back(p.name);
    json shape = json::array();
    for (Eigen::Index d : p.tensor.shape()) shape.push_back(d);
    shapes.push_back(shape);
    values.insert(values.end(), p.tensor.data().begin(),
                  p.tensor.data().end());
  }
  io::write_f64(dir / "params.f64", values);

  json manifest{
      {"format_version", 1},
      {"names", names},
      {"shapes", shapes},
      {"has_adam_state", adam != nullptr},
  };
  if (!config_json.empty()) {
    manifest["config"] = json::parse(config_json);
  }
  json checksums{{"params.f64", io::crc64_hex(io::crc64(values))}};
  if (adam != nullptr) {
    manifest["adam_step"] = adam->step;
    std::vector<double> packed;
    for (const auto& m : adam->m) packed.insert(packed.end(), m.begin(), m.end());
    for (const auto& v : adam->v) packed.insert(packed.end(), v.begin(), v.end());
    io::write_f64(dir / "adam_state.f64", packed);
    checksums["adam_state.f64"] = io::crc64_hex(io::crc64(packed));
  }
  manifest["checksums"] = checksums;
  io::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  json manifest;
  try {
    manifest = json::parse(io::read_text(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw FormatError("bad checkpoint manifest: " + std::string(e.what()));
  }
  if (!manifest.contains("format_version") ||
      manifest["format_version"] != 1) {
    throw FormatError("unsupported checkpoint format version");
  }

  Checkpoint ckpt;
  Eigen::Index total = 0;
  try {
    for (const auto& n : manifest.at("names")) {
      ckpt.names.push_back(n.get<std::string>());
    }
    for (const auto& s : manifest.at("shapes")) {
      Shape shape;
      for (const auto& d : s) shape.push_back(d.get<Eigen::Index>());
      total += numel(shape);
      ckpt.shapes.push_back(std::move(shape));
    }
    ckpt.has_adam = manifest.at("has_adam_state").get<bool>();
    if (manifest.contains("config")) {
      ckpt.config_json = manifest["config"].dump();
    }
  } catch (const json::exception& e) {
    throw FormatError("checkpoint manifest missing fields: " +
                      std::string(e.what()));
  }
  if (ckpt.names.size() != ckpt.shapes.size()) {
    throw FormatError("checkpoint names/shapes length mismatch");
  }

  auto read_checked = [&](const char* name,
                          std::size_t expected) -> std::vector<double> {
    std::vector<double> values = io::read_f64_raw(dir / name);
    const std::string want =
        manifest.at("checksums").at(name).get<std::string>();
    if (io::crc64_hex(io::crc64(values)) != want) {
      throw ChecksumError(std::string(name) + ": checksum mismatch");
    }
    if (values.size() != expected) {
      throw ShapeMismatch(std::string(name) + ": manifest implies " +
                          std::to_string(expected) + " values, file holds " +
                          std::to_string(values.size()));
    }
    return values;
  };

  std::vector<double> flat = read_checked("params.f64", std::size_t(total));
  std::size_t offset = 0;
  for (const Shape& shape : ckpt.shapes) {
    std::size_t count = std::size_t(numel(shape));
    ckpt.values.emplace_back(flat.begin() + Eigen::Index(offset),
                             flat.begin() + Eigen::Index(offset + count));
    offset += count;
  }

  if (ckpt.has_adam) {
    std::vector<double> packed =
        read_checked("adam_state.f64", std::size_t(2 * total));
    ckpt.adam.step = manifest.at("adam_step").get<std::int64_t>();
    std::size_t pos = 0;
    for (const Shape& shape : ckpt.shapes) {
      std::size_t count = std::size_t(numel(shape));
      ckpt.adam.m.emplace_back(packed.begin() + Eigen::Index(pos),
                               packed.begin() + Eigen::Index(pos + count));
      pos += count;
    }
    for (const Shape& shape : ckpt.shapes) {
      std::size_t count = std::size_t(numel(shape));
      ckpt.adam.v.emplace_back(packed.begin() + Eigen::Index(pos),
                               packed.begin() + Eigen::Index(pos + count));
      pos += count;
    }
  }
  return ckpt;
}

void restore_parameters(const Checkpoint& ckpt,
                        std::vector<Parameter>& params) {
  if (ckpt.names.size() != params.size()) {
    throw ShapeMismatch("checkpoint holds " +
                        std::to_string(ckpt.names.size()) +
                        " parameters, model has " +
                        std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (ckpt.names[i] != params[i].name) {
      throw ShapeMismatch("checkpoint parameter " + std::to_string(i) +
                          " is '" + ckpt.names[i] + "', model expects '" +
                          params[i].name + "'");
    }
    if (ckpt.shapes[i] != params[i].tensor.shape()) {
      throw ShapeMismatch("checkpoint shape mismatch for " + ckpt.names[i]);
    }
    params[i].tensor.data() = ckpt.values[i];
  }
}

}  // namespace qst::ad
