// SPDX-License-Identifier: Apache-2.0
//
// Config-driven runs: calibration, sampling, residual curves, sweeps and
// coefficient dumps over a Gaussian-mixture model.
#pragma once

#include <algorithm>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "iia/config.hpp"
#include "iia/iia.hpp"
#include "iia/metrics.hpp"
#include "iia/table_io.hpp"

namespace iia {

inline GaussianMixture load_model(const ExperimentConfig& cfg) {
  return cfg.model_path ? load_model(*cfg.model_path) : default_mixture();
}

inline TimeGrid grid_with_steps(const ExperimentConfig& cfg, std::size_t steps) {
  GridSpec spec = cfg.grid;
  spec.steps = steps;
  return build_grid(spec, cfg.param);
}

inline TimeGrid grid_for_nfe(const ExperimentConfig& cfg, std::size_t nfe) {
  return grid_with_steps(cfg, steps_for_nfe(base_solver(cfg.variant), nfe, cfg.grid.terminal_zero));
}

/// Calls fn with the model the variant samples from: the mixture itself, or
/// its classifier-free guided view for guided variants.
template <class Fn>
decltype(auto) with_sampling_model(const ExperimentConfig& cfg, const GaussianMixture& gm, Fn&& fn) {
  if (is_guided(cfg.variant)) {
    if (gm.conditions().empty()) throw ConfigError("guided runs need a model spec with named conditions");
    Guided<GaussianMixture> guided(gm, cfg.guidance_scale);
    return fn(guided);
  }
  return fn(gm);
}

inline std::vector<std::string> condition_labels_for(const ExperimentConfig& cfg, const GaussianMixture& gm) {
  return is_guided(cfg.variant) ? gm.condition_labels() : std::vector<std::string>{};
}

inline CalibrationBatch calibration_batch_for(const ExperimentConfig& cfg, const GaussianMixture& gm,
                                              const TimeGrid& grid) {
  return make_calibration_batch(gm.dim(), grid, cfg.batch, cfg.seed, condition_labels_for(cfg, gm),
                                cfg.condition_set_size, Stream::calibration);
}

inline CalibrationBatch evaluation_batch_for(const ExperimentConfig& cfg, const GaussianMixture& gm,
                                             const TimeGrid& grid, std::size_t size) {
  return make_calibration_batch(gm.dim(), grid, size, cfg.eval_seed, condition_labels_for(cfg, gm),
                                cfg.condition_set_size, Stream::evaluation);
}

inline CalibrationOptions calibration_options_for(const ExperimentConfig& cfg) {
  CalibrationOptions o;
  o.M = cfg.M;
  o.r = cfg.r;
  o.trajectory = cfg.trajectory;
  o.workers = cfg.workers;
  o.model_id = cfg.model_id;
  o.guidance_scale = is_guided(cfg.variant) ? cfg.guidance_scale : 0.0;
  return o;
}

inline CoefficientTable calibrate_config(const ExperimentConfig& cfg, const GaussianMixture& gm, const TimeGrid& grid) {
  const CalibrationBatch batch = calibration_batch_for(cfg, gm, grid);
  return with_sampling_model(cfg, gm, [&](const auto& model) {
    return calibrate(cfg.variant, model, grid, batch, calibration_options_for(cfg));
  });
}

inline std::string table_file_name(Variant v, std::size_t nfe) {
  return std::string(to_string(v)) + "_nfe" + std::to_string(nfe) + ".json";
}

/// Supplies the table for one NFE point (load from disk or calibrate).
using TableProvider = std::function<CoefficientTable(std::size_t nfe, const TimeGrid& grid)>;

inline TableProvider calibrating_provider(const ExperimentConfig& cfg, const GaussianMixture& gm) {
  return [&cfg, &gm](std::size_t, const TimeGrid& grid) { return calibrate_config(cfg, gm, grid); };
}

inline TableProvider loading_provider(const ExperimentConfig& cfg, std::filesystem::path dir) {
  return [&cfg, dir = std::move(dir)](std::size_t nfe, const TimeGrid& grid) {
    CoefficientTable t = load_table(dir / table_file_name(cfg.variant, nfe));
    if (t.variant != cfg.variant) throw std::invalid_argument("stored table has variant " + std::string(to_string(t.variant)));
    if (t.grid_hash != grid_hash(grid)) throw std::invalid_argument("stored table for NFE " + std::to_string(nfe) + " was calibrated on a different grid");
    return t;
  };
}

/// Evaluation initial states, conditions and converged references, shared by
/// every NFE point since all grids span the same [t_max, t_end].
struct EvaluationSet {
  std::vector<Vec> z0;
  std::vector<Condition> conditions;
  std::vector<Vec> references;
  std::vector<std::size_t> refinement;  // per-sample refinement the reference settled at
  std::vector<Vec> data_cloud;  // exact data draws; empty for guided runs
};

inline EvaluationSet make_evaluation_set(const ExperimentConfig& cfg, const GaussianMixture& gm) {
  const TimeGrid ref_grid = grid_with_steps(cfg, cfg.reference_steps);
  const CalibrationBatch b = evaluation_batch_for(cfg, gm, ref_grid, cfg.eval_samples);
  EvaluationSet e;
  e.z0 = b.z0;
  e.conditions = b.conditions;
  e.references.resize(e.z0.size());
  e.refinement.resize(e.z0.size());
  with_sampling_model(cfg, gm, [&](const auto& model) {
    parallel_for(e.z0.size(), cfg.workers, [&](std::size_t k) {
      auto ref = reference_terminal_info(model, ref_grid, e.z0[k], cfg.reference_m, e.conditions[k]);
      e.references[k] = std::move(ref.z);
      e.refinement[k] = ref.refinement;
    });
    return 0;
  });
  if (!is_guided(cfg.variant)) {
    for (std::size_t k = 0; k < cfg.eval_samples; ++k) {
      auto eng = keyed_engine(cfg.eval_seed, Stream::evaluation, Lane::data, k);
      e.data_cloud.push_back(sample_mixture(gm, eng));
    }
  }
  return e;
}

/// Baseline solver and IIA variant at every configured NFE. Tables produced
/// along the way are passed to `on_table`.
inline std::vector<MetricsRow> run_sweep(const ExperimentConfig& cfg, const GaussianMixture& gm,
                                         const TableProvider& tables,
                                         const std::function<void(std::size_t, const CoefficientTable&)>& on_table = {},
                                         const EvaluationSet* precomputed = nullptr) {
  EvaluationSet local;
  if (!precomputed) local = make_evaluation_set(cfg, gm);
  const EvaluationSet& ev = precomputed ? *precomputed : local;
  const Solver solver = base_solver(cfg.variant);
  std::vector<MetricsRow> rows;
  if (!ev.refinement.empty()) {
    const std::size_t worst = *std::max_element(ev.refinement.begin(), ev.refinement.end());
    rows.push_back({"reference", 0, std::nullopt, "max_refinement", static_cast<double>(worst), ev.refinement.size()});
  }
  SweepOptions opt;
  opt.swd_projections = cfg.swd_projections;
  opt.eval_seed = cfg.eval_seed;
  opt.workers = cfg.workers;
  for (std::size_t nfe : cfg.nfe) {
    const TimeGrid grid = grid_for_nfe(cfg, nfe);
    const CoefficientTable table = tables(nfe, grid);
    if (on_table) on_table(nfe, table);
    std::vector<SweepEntry> entries{{std::string(to_string(solver)), solver, grid, nullptr, nfe},
                                    {std::string(to_string(cfg.variant)), solver, grid, &table, nfe}};
    auto part = with_sampling_model(cfg, gm, [&](const auto& model) {
      return terminal_error_sweep(model, entries, ev.z0, ev.conditions, ev.references, ev.data_cloud, opt);
    });
    rows.insert(rows.end(), part.begin(), part.end());
  }
  return rows;
}

/// Residual curves on a fresh evaluation batch (metric "residual_mse") and
/// on the calibration batch ("residual_mse_calibration").
inline std::vector<MetricsRow> run_residuals(const ExperimentConfig& cfg, const GaussianMixture& gm,
                                             const TimeGrid& grid, const CoefficientTable& table) {
  const CalibrationBatch fresh = evaluation_batch_for(cfg, gm, grid, cfg.batch);
  const CalibrationBatch calib = calibration_batch_for(cfg, gm, grid);
  return with_sampling_model(cfg, gm, [&](const auto& model) {
    auto rows = residual_curve(cfg.variant, model, grid, &table, fresh, cfg.M, cfg.r, cfg.workers);
    auto in_sample = residual_curve(cfg.variant, model, grid, &table, calib, cfg.M, cfg.r, cfg.workers);
    for (auto& r : in_sample) r.metric = "residual_mse_calibration";
    rows.insert(rows.end(), in_sample.begin(), in_sample.end());
    return rows;
  });
}

/// Per-step coefficient curves (gamma for biia_edm) and calibration
/// diagnostics.
inline std::vector<MetricsRow> coefficient_rows(const CoefficientTable& table) {
  std::vector<MetricsRow> rows;
  const std::string name(to_string(table.variant));
  const std::size_t nfe = grid_nfe(base_solver(table.variant), table.grid());
  for (const auto& s : table.steps) {
    if (s.coeffs.empty()) continue;
    const auto reported = table.reported_coefficients(s.i);
    for (std::size_t j = 0; j < reported.size(); ++j)
      rows.push_back({name, nfe, s.i, "coeff_" + std::to_string(j), reported[j], table.batch_size});
    rows.push_back({name, nfe, s.i, "baseline_mse", s.baseline_mse, table.batch_size});
    rows.push_back({name, nfe, s.i, "iia_mse", s.iia_mse, table.batch_size});
    rows.push_back({name, nfe, s.i, "ridge", s.ridge ? 1.0 : 0.0, table.batch_size});
    rows.push_back({name, nfe, s.i, "degenerate", s.degenerate ? 1.0 : 0.0, table.batch_size});
    if (std::isfinite(s.condition)) rows.push_back({name, nfe, s.i, "condition", s.condition, table.batch_size});
  }
  return rows;
}

}  // namespace iia
