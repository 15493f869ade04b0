// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration and the model-spec file format (JSON).
#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iia/iia.hpp"
#include "iia/io.hpp"
#include "iia/schedule.hpp"
#include "iia/score.hpp"

namespace iia {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Model spec
// ---------------------------------------------------------------------------

/// {"dimension": d,
///  "components": [{"weight": w, "mean": [...], "scale": s}, ...],
///  "class_conditions": true,                // optional: "class<k>" labels
///  "conditions": {"label": [m_0, m_1, ...]}} // optional: explicit reweightings
inline GaussianMixture model_from_json(const nlohmann::json& j) {
  try {
    const auto& comps = j.at("components");
    if (!comps.is_array() || comps.empty()) throw ConfigError("model spec: 'components' must be a non-empty array");
    std::vector<MixtureComponent> out;
    for (const auto& c : comps) {
      auto mean = c.at("mean").get<std::vector<double>>();
      Vec m = Eigen::Map<const Vec>(mean.data(), static_cast<Eigen::Index>(mean.size()));
      out.push_back({c.at("weight").get<double>(), std::move(m), c.value("scale", 1.0)});
    }
    if (j.contains("dimension") && j.at("dimension").get<Eigen::Index>() != out.front().mean.size())
      throw ConfigError("model spec: 'dimension' does not match the component means");
    GaussianMixture gm(std::move(out));
    if (j.value("class_conditions", false)) gm.add_class_conditions();
    if (j.contains("conditions"))
      for (const auto& [label, mult] : j.at("conditions").items()) gm.add_condition(label, mult.get<std::vector<double>>());
    return gm;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model spec: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("model spec: ") + e.what());
  }
}

inline nlohmann::json model_to_json(const GaussianMixture& gm) {
  nlohmann::json comps = nlohmann::json::array();
  for (const auto& c : gm.components())
    comps.push_back({{"weight", c.weight}, {"mean", std::vector<double>(c.mean.data(), c.mean.data() + c.mean.size())},
                     {"scale", c.scale}});
  nlohmann::json j{{"dimension", gm.dim()}, {"components", comps}};
  if (!gm.conditions().empty()) j["conditions"] = gm.conditions();
  return j;
}

inline GaussianMixture load_model(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("model spec '" + path.string() + "': " + e.what());
  }
  return model_from_json(j);
}

/// 2-D, three unit-scale components with weights 0.5/0.3/0.2 and
/// well-separated means; class conditions "class0".."class2".
inline GaussianMixture default_mixture() {
  GaussianMixture gm({{0.5, (Vec(2) << -4.0, 0.0).finished(), 1.0},
                      {0.3, (Vec(2) << 4.0, 0.0).finished(), 1.0},
                      {0.2, (Vec(2) << 0.0, 5.0).finished(), 1.0}});
  gm.add_class_conditions();
  return gm;
}

// ---------------------------------------------------------------------------
// Experiment config
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  std::optional<std::filesystem::path> model_path;  // default_mixture() when empty
  std::string model_id = "default_mixture";
  Variant variant = Variant::iia_edm;
  std::size_t M = 3;
  std::size_t r = 1;
  NoiseParam param;
  GridSpec grid;
  std::vector<std::size_t> nfe;
  std::size_t batch = 200;
  std::uint64_t seed = 0;
  std::uint64_t eval_seed = 1;
  std::size_t eval_samples = 2048;
  double guidance_scale = 0.0;
  std::size_t condition_set_size = 20;
  TrajectoryPolicy trajectory = TrajectoryPolicy::iia;
  std::size_t reference_steps = 256;
  std::size_t reference_m = 64;
  std::size_t swd_projections = 64;
  unsigned workers = 1;
};

/// Defaults for a variant: (M, r) = (3, 1); |B| = 200 for the EDM variants,
/// 16 for DDIM/PNDM, 20 for the DPM-Solver and guided runs; M = 10 and a
/// 20-label condition set for guided DDIM. EDM variants run VE on an
/// edm_rho grid ending at t = 0; the rest run VP on a uniform grid.
inline ExperimentConfig default_config(Variant v) {
  ExperimentConfig c;
  c.variant = v;
  c.M = is_guided(v) ? 10 : 3;
  c.r = 1;
  c.condition_set_size = 20;
  switch (v) {
    case Variant::biia_edm:
    case Variant::iia_edm: c.batch = 200; break;
    case Variant::iia_ddim:
    case Variant::iia_spndm:
    case Variant::iia_ipndm: c.batch = 16; break;
    case Variant::iia_ddim_guided:
    case Variant::iia_dpm2m: c.batch = 20; break;
  }
  if (is_additive(v)) {
    c.param = NoiseParam::vp();
    c.grid = GridSpec{GridKind::uniform, 8, 1e-3, 1.0, 7.0, false};
  } else {
    c.param = NoiseParam::ve();
    c.grid = GridSpec{GridKind::edm_rho, 8, 0.002, 80.0, 7.0, true};
  }
  c.nfe = {7, 9, 11, 13};
  c.guidance_scale = is_guided(v) ? 3.0 : 0.0;
  return c;
}

namespace detail {
template <class T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}
}  // namespace detail

/// Parses a config object. Keys left out take the variant's defaults; a
/// relative model path resolves against `base_dir`.
inline ExperimentConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {},
                                         std::optional<Variant> variant_override = std::nullopt) {
  try {
    if (!j.is_object()) throw ConfigError("config: top level must be an object");
    Variant v = variant_override ? *variant_override
                                 : (j.contains("variant") ? parse_variant(j.at("variant").get<std::string>())
                                                          : Variant::iia_edm);
    ExperimentConfig c = default_config(v);
    if (j.contains("model")) {
      std::filesystem::path p = j.at("model").get<std::string>();
      c.model_path = p.is_relative() ? base_dir / p : p;
      c.model_id = p.stem().string();
    }
    detail::read_opt(j, "model_id", c.model_id);
    detail::read_opt(j, "M", c.M);
    detail::read_opt(j, "r", c.r);
    if (j.contains("param")) {
      const auto& p = j.at("param");
      c.param.kind = parse_param_kind(p.at("kind").get<std::string>());
      c.param.beta_min = p.value("beta_min", 0.1);
      c.param.beta_max = p.value("beta_max", 20.0);
    }
    if (j.contains("grid")) {
      const auto& g = j.at("grid");
      if (g.contains("kind")) c.grid.kind = parse_grid_kind(g.at("kind").get<std::string>());
      detail::read_opt(g, "steps", c.grid.steps);
      detail::read_opt(g, "t_min", c.grid.t_min);
      detail::read_opt(g, "t_max", c.grid.t_max);
      detail::read_opt(g, "rho", c.grid.rho);
      detail::read_opt(g, "terminal_zero", c.grid.terminal_zero);
    }
    detail::read_opt(j, "nfe", c.nfe);
    detail::read_opt(j, "batch", c.batch);
    detail::read_opt(j, "seed", c.seed);
    detail::read_opt(j, "eval_seed", c.eval_seed);
    detail::read_opt(j, "eval_samples", c.eval_samples);
    detail::read_opt(j, "guidance_scale", c.guidance_scale);
    detail::read_opt(j, "condition_set_size", c.condition_set_size);
    if (j.contains("calibration_trajectory")) {
      const auto s = j.at("calibration_trajectory").get<std::string>();
      if (s == "iia") c.trajectory = TrajectoryPolicy::iia;
      else if (s == "baseline") c.trajectory = TrajectoryPolicy::baseline;
      else throw ConfigError("config: calibration_trajectory must be 'iia' or 'baseline'");
    }
    detail::read_opt(j, "reference_steps", c.reference_steps);
    detail::read_opt(j, "reference_m", c.reference_m);
    detail::read_opt(j, "swd_projections", c.swd_projections);
    detail::read_opt(j, "workers", c.workers);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

inline ExperimentConfig load_config(const std::filesystem::path& path,
                                    std::optional<Variant> variant_override = std::nullopt) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path.string() + "': " + e.what());
  }
  return config_from_json(j, path.parent_path(), variant_override);
}

/// Throws ConfigError on values no run can use.
inline void validate_config(const ExperimentConfig& c) {
  if (c.M < 1) throw ConfigError("config: M must be >= 1");
  if (c.batch < 1) throw ConfigError("config: batch must be >= 1");
  if (c.eval_samples < 1) throw ConfigError("config: eval_samples must be >= 1");
  if (c.reference_m < 32) throw ConfigError("config: reference_m must be >= 32");
  if (c.reference_steps < 2) throw ConfigError("config: reference_steps must be >= 2");
  if (c.swd_projections < 1) throw ConfigError("config: swd_projections must be >= 1");
  if (c.condition_set_size < 1) throw ConfigError("config: condition_set_size must be >= 1");
  if (c.variant == Variant::iia_edm && c.param.kind != ParamKind::ve)
    throw ConfigError("config: iia_edm requires the VE parameterization");
  if (!std::isfinite(c.guidance_scale)) throw ConfigError("config: guidance_scale must be finite");
  if (c.workers < 1) throw ConfigError("config: workers must be >= 1");
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["model"] = c.model_path ? c.model_path->generic_string() : std::string();
  j["model_id"] = c.model_id;
  j["variant"] = std::string(to_string(c.variant));
  j["M"] = c.M;
  j["r"] = c.r;
  j["param"] = {{"kind", std::string(to_string(c.param.kind))}, {"beta_min", c.param.beta_min},
                {"beta_max", c.param.beta_max}};
  j["grid"] = {{"kind", std::string(to_string(c.grid.kind))}, {"steps", c.grid.steps}, {"t_min", c.grid.t_min},
               {"t_max", c.grid.t_max},  {"rho", c.grid.rho},  {"terminal_zero", c.grid.terminal_zero}};
  j["nfe"] = c.nfe;
  j["batch"] = c.batch;
  j["seed"] = c.seed;
  j["eval_seed"] = c.eval_seed;
  j["eval_samples"] = c.eval_samples;
  j["guidance_scale"] = c.guidance_scale;
  j["condition_set_size"] = c.condition_set_size;
  j["calibration_trajectory"] = c.trajectory == TrajectoryPolicy::iia ? "iia" : "baseline";
  j["reference_steps"] = c.reference_steps;
  j["reference_m"] = c.reference_m;
  j["swd_projections"] = c.swd_projections;
  return j;
}

}  // namespace iia
