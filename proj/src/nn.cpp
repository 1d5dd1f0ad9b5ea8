#include "pva/nn.hpp"

#include "pva/binary_io.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace pva::nn {

using nlohmann::json;

void ModelSpec::validate() const {
  if (in_channels < 1) throw ValidationError("model needs at least one input channel");
  for (int w : widths)
    if (w < 1) throw ValidationError("model layer widths must be positive");
  if (!patch.positive()) throw ValidationError("model patch dims must be positive");
}

json to_json(const ModelSpec& spec) {
  return json{{"role", spec.role == ModelRole::sl ? "S_l" : "S_g"},
              {"widths", spec.widths},
              {"in_channels", spec.in_channels},
              {"patch", {spec.patch.h, spec.patch.w, spec.patch.d}}};
}

ModelSpec model_spec_from_json(const json& j, ModelSpec s) {
  try {
    if (j.contains("role")) {
      const auto role = j.at("role").get<std::string>();
      if (role == "S_l")
        s.role = ModelRole::sl;
      else if (role == "S_g")
        s.role = ModelRole::sg;
      else
        throw ConfigError("unknown model role '" + role + "'");
    }
    if (j.contains("widths")) s.widths = j.at("widths").get<std::vector<int>>();
    s.in_channels = j.value("in_channels", s.in_channels);
    if (j.contains("patch")) {
      const auto& p = j.at("patch");
      s.patch = {p.at(0).get<int>(), p.at(1).get<int>(), p.at(2).get<int>()};
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed model spec: ") + e.what());
  }
  s.validate();
  return s;
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

std::string GradCheckReport::format() const {
  std::ostringstream out;
  char line[160];
  for (const auto& e : entries) {
    if (e.skipped) {
      std::snprintf(line, sizeof line, "%-16s skipped (frozen)\n", e.name.c_str());
    } else {
      std::snprintf(line, sizeof line, "%-16s n=%-6zu max_rel_err=%.3e %s\n", e.name.c_str(),
                    e.checked, e.max_rel_error, e.max_rel_error < tolerance ? "ok" : "FAIL");
    }
    out << line;
  }
  return out.str();
}

GradCheckReport grad_check(Backbone<double>& model, ParamStore<double>& params,
                           const Volume<double>& patch, const Volume<double>& target, double eps,
                           double tolerance) {
  GradCheckReport report;
  report.tolerance = tolerance;

  params.zero_grads();
  const auto out = model.forward(params, patch);
  const auto loss = loss_seg(out.logit, target);
  model.backward(params, loss.grad);

  auto loss_at = [&]() { return loss_seg(model.infer(params, patch).logit, target).value; };

  for (const auto& name : model.parameter_names()) {
    auto& entry = params.at(name);
    GradCheckEntry result{name};
    if (entry.frozen) {
      result.skipped = true;
      report.entries.push_back(result);
      continue;
    }
    for (Eigen::Index i = 0; i < entry.size(); ++i) {
      const double saved = entry.value[i];
      entry.value[i] = saved + eps;
      const double up = loss_at();
      entry.value[i] = saved - eps;
      const double down = loss_at();
      entry.value[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      result.max_rel_error =
          std::max(result.max_rel_error, relative_error(entry.grad[i], numeric));
      ++result.checked;
    }
    report.entries.push_back(result);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[4] = {'P', 'C', 'K', 'P'};

void append_entry(json& manifest, std::string& blob, const std::string& name,
                  const std::vector<int>& shape, const Array<float>& values) {
  const std::size_t offset = blob.size() / 4;
  for (Eigen::Index i = 0; i < values.size(); ++i) put_f32(blob, values[i]);
  manifest.push_back(
      {{"name", name}, {"shape", shape}, {"offset", offset}, {"len", values.size()}});
}

}  // namespace

std::string rng_to_string(const std::mt19937_64& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

std::mt19937_64 rng_from_string(const std::string& state) {
  std::mt19937_64 rng;
  std::istringstream in(state);
  in >> rng;
  if (!in) throw FormatError("malformed RNG state");
  return rng;
}

void save_checkpoint(const std::string& path, const ParamStore<float>& params,
                     const std::string& rng_state, const json& extra) {
  json entries = json::array();
  json frozen = json::array();
  std::string blob;
  for (const auto& [name, e] : params.entries()) {
    append_entry(entries, blob, name, e.shape, e.value);
    append_entry(entries, blob, "adam.m/" + name, e.shape, e.m);
    append_entry(entries, blob, "adam.v/" + name, e.shape, e.v);
    if (e.frozen) frozen.push_back(name);
  }
  const json manifest{{"entries", entries},
                      {"step_count", params.step_count},
                      {"rng_state", rng_state},
                      {"frozen", frozen},
                      {"extra", extra}};
  const std::string text = manifest.dump();
  std::string bytes(kMagic, 4);
  put_u32(bytes, static_cast<std::uint32_t>(text.size()));
  bytes += text;
  bytes += blob;
  write_file(path, bytes);
}

Checkpoint load_checkpoint(const std::string& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 8 || bytes.compare(0, 4, kMagic, 4) != 0)
    throw FormatError("not a checkpoint file: " + path);
  const std::uint32_t n = get_u32(bytes, 4);
  if (bytes.size() < 8 + static_cast<std::size_t>(n))
    throw FormatError("truncated checkpoint manifest: " + path);
  const std::size_t blob_offset = 8 + n;
  const std::size_t blob_floats = (bytes.size() - blob_offset) / 4;

  Checkpoint ck;
  try {
    const json manifest = json::parse(bytes.substr(8, n));
    std::map<std::string, std::pair<std::vector<int>, Array<float>>> raw;
    for (const auto& e : manifest.at("entries")) {
      const auto offset = e.at("offset").get<std::size_t>();
      const auto len = e.at("len").get<std::size_t>();
      if (offset + len > blob_floats) throw LengthError("checkpoint entry exceeds blob: " + path);
      Array<float> values(static_cast<Eigen::Index>(len));
      for (std::size_t i = 0; i < len; ++i)
        values[static_cast<Eigen::Index>(i)] = get_f32(bytes, blob_offset + 4 * (offset + i));
      raw[e.at("name").get<std::string>()] = {e.at("shape").get<std::vector<int>>(), std::move(values)};
    }
    for (auto& [name, item] : raw) {
      if (name.rfind("adam.", 0) == 0) continue;
      auto& entry = ck.params.add(name, item.first, item.second);
      if (auto it = raw.find("adam.m/" + name); it != raw.end()) entry.m = it->second.second;
      if (auto it = raw.find("adam.v/" + name); it != raw.end()) entry.v = it->second.second;
    }
    for (const auto& name : manifest.value("frozen", json::array()))
      ck.params.at(name.get<std::string>()).frozen = true;
    ck.params.step_count = manifest.at("step_count").get<std::int64_t>();
    ck.rng_state = manifest.at("rng_state").get<std::string>();
    ck.extra = manifest.value("extra", json::object());
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  return ck;
}

}  // namespace pva::nn
