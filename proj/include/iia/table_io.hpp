// SPDX-License-Identifier: Apache-2.0
//
// JSON persistence for coefficient tables. Doubles are written in their
// shortest round-trip form, so save/load is bit-exact.
#pragma once

#include <cmath>
#include <filesystem>
#include <limits>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "iia/iia.hpp"
#include "iia/io.hpp"

namespace iia {

class TableFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline nlohmann::json param_to_json(const NoiseParam& p) {
  nlohmann::json j{{"kind", std::string(to_string(p.kind))}};
  if (p.kind == ParamKind::vp) {
    j["beta_min"] = p.beta_min;
    j["beta_max"] = p.beta_max;
  }
  return j;
}

inline NoiseParam param_from_json(const nlohmann::json& j) {
  NoiseParam p;
  p.kind = parse_param_kind(j.at("kind").get<std::string>());
  if (p.kind == ParamKind::vp) {
    p.beta_min = j.value("beta_min", 0.1);
    p.beta_max = j.value("beta_max", 20.0);
  }
  return p;
}

// JSON has no infinity; an unbounded condition number is written as null.
inline nlohmann::json finite_or_null(double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); }

inline double number_or_inf(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::infinity() : j.get<double>();
}

}  // namespace detail

inline std::string table_to_string(const CoefficientTable& table) {
  nlohmann::json j;
  j["version"] = table.version;
  j["variant"] = std::string(to_string(table.variant));
  j["M"] = table.M;
  j["r"] = table.r;
  j["batch"] = table.batch_size;
  j["seed"] = table.seed;
  j["model_id"] = table.model_id;
  j["guidance_scale"] = table.guidance_scale;
  j["calibration_trajectory"] = table.trajectory;
  j["param"] = detail::param_to_json(table.param);
  j["grid_hash"] = table.grid_hash;
  j["grid_times"] = table.grid_times;
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : table.steps) {
    steps.push_back({{"i", s.i},
                     {"coeffs", s.coeffs},
                     {"degenerate", s.degenerate},
                     {"ridge", s.ridge},
                     {"condition", detail::finite_or_null(s.condition)},
                     {"baseline_mse", s.baseline_mse},
                     {"iia_mse", s.iia_mse}});
  }
  j["steps"] = std::move(steps);
  return j.dump(1) + "\n";
}

inline CoefficientTable table_from_string(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw TableFormatError(std::string("coefficient table: malformed file: ") + e.what());
  }
  CoefficientTable t;
  try {
    t.version = j.at("version").get<int>();
    if (t.version != kTableVersion)
      throw TableFormatError("coefficient table: unsupported version " + std::to_string(t.version) + " (expected " +
                             std::to_string(kTableVersion) + ")");
    t.variant = parse_variant(j.at("variant").get<std::string>());
    t.M = j.at("M").get<std::size_t>();
    t.r = j.at("r").get<std::size_t>();
    t.batch_size = j.at("batch").get<std::size_t>();
    t.seed = j.at("seed").get<std::uint64_t>();
    t.model_id = j.at("model_id").get<std::string>();
    t.guidance_scale = j.value("guidance_scale", 0.0);
    t.trajectory = j.value("calibration_trajectory", std::string("iia"));
    t.param = detail::param_from_json(j.at("param"));
    t.grid_hash = j.at("grid_hash").get<std::string>();
    t.grid_times = j.at("grid_times").get<std::vector<double>>();
    const auto& steps = j.at("steps");
    for (std::size_t k = 0; k < steps.size(); ++k) {
      const auto& s = steps[k];
      StepCoefficients sc;
      sc.i = s.at("i").get<std::size_t>();
      sc.coeffs = s.at("coeffs").get<std::vector<double>>();
      sc.degenerate = s.value("degenerate", false);
      sc.ridge = s.value("ridge", false);
      sc.condition = detail::number_or_inf(s.value("condition", nlohmann::json(0.0)));
      sc.baseline_mse = s.value("baseline_mse", 0.0);
      sc.iia_mse = s.value("iia_mse", 0.0);
      t.steps.push_back(std::move(sc));
    }
  } catch (const nlohmann::json::exception& e) {
    throw TableFormatError(std::string("coefficient table: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw TableFormatError(e.what());
  }
  try {
    t.validate();
    if (grid_hash(t.grid()) != t.grid_hash)
      throw TableFormatError("coefficient table: grid_hash does not match grid_times");
  } catch (const std::invalid_argument& e) {
    throw TableFormatError(e.what());
  }
  return t;
}

inline void save_table(const CoefficientTable& table, const std::filesystem::path& path) {
  table.validate();
  write_file_atomic(path, table_to_string(table));
}

inline CoefficientTable load_table(const std::filesystem::path& path) { return table_from_string(read_text_file(path)); }

}  // namespace iia
