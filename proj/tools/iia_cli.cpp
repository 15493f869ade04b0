// SPDX-License-Identifier: Apache-2.0
//
// iia: calibrate, sample, residuals, sweep, dump-coeffs, check.
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "iia/campaign.hpp"
#include "iia/checks.hpp"
#include "iia/config.hpp"
#include "iia/io.hpp"
#include "iia/table_io.hpp"

namespace fs = std::filesystem;

namespace {

struct Flags {
  std::string config;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  std::string variant;
  std::vector<std::size_t> nfe;
  std::optional<std::size_t> m;
  std::optional<std::size_t> r;
  std::optional<std::size_t> batch;
  std::optional<std::size_t> samples;
  std::optional<unsigned> workers;
  std::string table;
  std::string tables;
};

void add_common(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "experiment config (JSON)");
  sub->add_option("--out", f.out, "output directory");
  sub->add_option("--seed", f.seed, "calibration seed");
  sub->add_option("--variant", f.variant, "IIA variant id");
  sub->add_option("--nfe", f.nfe, "NFE list")->delimiter(',');
  sub->add_option("--m", f.m, "fine-grained refinement M");
  sub->add_option("--r", f.r, "history depth r");
  sub->add_option("--batch", f.batch, "calibration batch size");
  sub->add_option("--samples", f.samples, "evaluation sample count");
  sub->add_option("--workers", f.workers, "worker threads");
}

iia::ExperimentConfig resolve_config(const Flags& f) {
  std::optional<iia::Variant> v;
  if (!f.variant.empty()) v = iia::parse_variant(f.variant);
  iia::ExperimentConfig cfg = f.config.empty() ? iia::default_config(v.value_or(iia::Variant::iia_edm))
                                               : iia::load_config(f.config, v);
  if (f.seed) cfg.seed = *f.seed;
  if (!f.nfe.empty()) cfg.nfe = f.nfe;
  if (f.m) cfg.M = *f.m;
  if (f.r) cfg.r = *f.r;
  if (f.batch) cfg.batch = *f.batch;
  if (f.samples) cfg.eval_samples = *f.samples;
  if (f.workers) cfg.workers = *f.workers;
  iia::validate_config(cfg);
  return cfg;
}

void write_manifest(const fs::path& out, const std::string& subcommand, const iia::ExperimentConfig& cfg,
                    const std::vector<std::string>& outputs) {
  nlohmann::json j;
  j["tool"] = "iia";
  j["subcommand"] = subcommand;
  j["versions"] = {{"library", iia::kLibraryVersion},
                   {"table_format", iia::kTableVersion},
                   {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                 std::to_string(EIGEN_MINOR_VERSION)},
                   {"compiler", __VERSION__}};
  j["seeds"] = {{"calibration", cfg.seed}, {"calibration_stream", 0}, {"evaluation", cfg.eval_seed},
                {"evaluation_stream", 1}};
  j["config"] = iia::config_to_json(cfg);
  j["outputs"] = outputs;
  iia::write_file_atomic(out / ("manifest_" + subcommand + ".json"), j.dump(1) + "\n");
}

iia::CoefficientTable table_for(const iia::ExperimentConfig& cfg, const iia::GaussianMixture& gm, const Flags& f,
                                std::size_t nfe, const iia::TimeGrid& grid) {
  if (!f.table.empty()) {
    iia::CoefficientTable t = iia::load_table(f.table);
    if (t.grid_hash != iia::grid_hash(grid))
      throw std::invalid_argument("table '" + f.table + "' was calibrated on a different grid");
    return t;
  }
  if (!f.tables.empty()) return iia::loading_provider(cfg, f.tables)(nfe, grid);
  return iia::calibrate_config(cfg, gm, grid);
}

int cmd_calibrate(const Flags& f) {
  const auto cfg = resolve_config(f);
  const auto gm = iia::load_model(cfg);
  const fs::path out = f.out;
  std::vector<std::string> outputs;
  for (std::size_t nfe : cfg.nfe) {
    const auto grid = iia::grid_for_nfe(cfg, nfe);
    const auto table = iia::calibrate_config(cfg, gm, grid);
    const std::string name = iia::table_file_name(cfg.variant, nfe);
    iia::save_table(table, out / name);
    outputs.push_back(name);
    std::size_t ridge = 0, degenerate = 0;
    for (const auto& s : table.steps) {
      ridge += s.ridge;
      degenerate += s.degenerate;
    }
    std::cout << "calibrated " << iia::to_string(cfg.variant) << " NFE " << nfe << " (" << grid.steps()
              << " steps, ridge " << ridge << ", degenerate " << degenerate << ") -> " << (out / name).string() << "\n";
  }
  write_manifest(out, "calibrate", cfg, outputs);
  return 0;
}

std::string samples_csv(const std::vector<iia::Vec>& zs, const std::vector<iia::Condition>& conds) {
  std::string s = "index,label";
  for (Eigen::Index j = 0; j < zs.front().size(); ++j) s += ",x" + std::to_string(j);
  s += "\n";
  for (std::size_t k = 0; k < zs.size(); ++k) {
    s += std::to_string(k) + "," + conds[k].label.value_or("");
    for (Eigen::Index j = 0; j < zs[k].size(); ++j) s += "," + iia::format_double(zs[k][j]);
    s += "\n";
  }
  return s;
}

int cmd_sample(const Flags& f) {
  const auto cfg = resolve_config(f);
  const auto gm = iia::load_model(cfg);
  const fs::path out = f.out;
  std::vector<std::string> outputs;
  const iia::Solver solver = iia::base_solver(cfg.variant);
  for (std::size_t nfe : cfg.nfe) {
    const auto grid = iia::grid_for_nfe(cfg, nfe);
    const auto table = table_for(cfg, gm, f, nfe, grid);
    const auto batch = iia::evaluation_batch_for(cfg, gm, grid, cfg.eval_samples);
    for (const iia::CoefficientTable* t : {static_cast<const iia::CoefficientTable*>(nullptr), &table}) {
      std::vector<iia::Vec> zs(batch.size());
      iia::with_sampling_model(cfg, gm, [&](const auto& model) {
        iia::parallel_for(batch.size(), cfg.workers, [&](std::size_t k) {
          zs[k] = iia::run_sampler(solver, model, grid, batch.z0[k], batch.conditions[k], t).terminal.z;
        });
        return 0;
      });
      const std::string who = t ? std::string(iia::to_string(cfg.variant)) : std::string(iia::to_string(solver));
      const std::string name = "samples_" + who + "_nfe" + std::to_string(nfe) + ".csv";
      iia::write_file_atomic(out / name, samples_csv(zs, batch.conditions));
      outputs.push_back(name);
    }
  }
  write_manifest(out, "sample", cfg, outputs);
  std::cout << "wrote " << outputs.size() << " sample files to " << out.string() << "\n";
  return 0;
}

int cmd_residuals(const Flags& f) {
  const auto cfg = resolve_config(f);
  const auto gm = iia::load_model(cfg);
  const fs::path out = f.out;
  std::vector<iia::MetricsRow> rows;
  for (std::size_t nfe : cfg.nfe) {
    const auto grid = iia::grid_for_nfe(cfg, nfe);
    const auto table = table_for(cfg, gm, f, nfe, grid);
    auto part = iia::run_residuals(cfg, gm, grid, table);
    rows.insert(rows.end(), part.begin(), part.end());
  }
  iia::write_metrics_csv(out / "residuals.csv", rows);
  write_manifest(out, "residuals", cfg, {"residuals.csv"});
  std::cout << "wrote " << rows.size() << " rows to " << (out / "residuals.csv").string() << "\n";
  return 0;
}

int cmd_sweep(const Flags& f) {
  const auto cfg = resolve_config(f);
  const auto gm = iia::load_model(cfg);
  const fs::path out = f.out;
  std::vector<std::string> outputs{"sweep.csv"};
  const iia::TableProvider provider =
      f.tables.empty() ? iia::calibrating_provider(cfg, gm) : iia::loading_provider(cfg, f.tables);
  const auto rows = iia::run_sweep(cfg, gm, provider, [&](std::size_t nfe, const iia::CoefficientTable& t) {
    if (!f.tables.empty()) return;
    const std::string name = "tables/" + iia::table_file_name(cfg.variant, nfe);
    iia::save_table(t, out / name);
    outputs.push_back(name);
  });
  iia::write_metrics_csv(out / "sweep.csv", rows);
  write_manifest(out, "sweep", cfg, outputs);
  for (const auto& r : rows)
    if (r.metric == "terminal_error")
      std::cout << r.variant << " NFE " << r.nfe << " terminal error " << r.value << " (n=" << r.n << ")\n";
  return 0;
}

int cmd_dump_coeffs(const Flags& f) {
  const auto cfg = resolve_config(f);
  const auto gm = iia::load_model(cfg);
  const fs::path out = f.out;
  std::vector<iia::MetricsRow> rows;
  if (!f.table.empty()) {
    rows = iia::coefficient_rows(iia::load_table(f.table));
  } else {
    for (std::size_t nfe : cfg.nfe) {
      const auto grid = iia::grid_for_nfe(cfg, nfe);
      auto part = iia::coefficient_rows(table_for(cfg, gm, f, nfe, grid));
      rows.insert(rows.end(), part.begin(), part.end());
    }
  }
  iia::write_metrics_csv(out / "coeffs.csv", rows);
  write_manifest(out, "dump-coeffs", cfg, {"coeffs.csv"});
  std::cout << "wrote " << rows.size() << " rows to " << (out / "coeffs.csv").string() << "\n";
  return 0;
}

int cmd_check(const Flags& f) {
  const auto cfg = resolve_config(f);
  using namespace iia::checks;
  std::vector<CheckResult> results{reformulated_heun_equivalence(),
                                   baseline_embedding(),
                                   residual_dominance(),
                                   nested_dominance(),
                                   closed_form_gamma(),
                                   oracle_convergence(),
                                   default_hyperparameters(),
                                   determinism(64, 16),
                                   score_model_correctness(20, 50000)};
  bool ok = true;
  std::vector<iia::MetricsRow> rows;
  for (const auto& r : results) {
    std::printf("%s %d %s: %s\n", r.passed ? "PASS" : "FAIL", r.id, r.name.c_str(), r.detail.c_str());
    rows.push_back({"check", 0, static_cast<std::size_t>(r.id), r.name, r.passed ? 1.0 : 0.0, 1});
    ok = ok && r.passed;
  }
  const fs::path out = f.out;
  iia::write_metrics_csv(out / "check.csv", rows);
  write_manifest(out, "check", cfg, {"check.csv"});
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Improved integration approximation for diffusion ODE samplers"};
  app.require_subcommand(1);
  Flags f;
  auto* calibrate = app.add_subcommand("calibrate", "calibrate coefficient tables");
  auto* sample = app.add_subcommand("sample", "write terminal samples (baseline and IIA)");
  auto* residuals = app.add_subcommand("residuals", "per-step residual curves against the fine oracle");
  auto* sweep = app.add_subcommand("sweep", "terminal error and sliced W2 over an NFE list");
  auto* dump = app.add_subcommand("dump-coeffs", "per-step coefficient curves");
  auto* check = app.add_subcommand("check", "run the invariant suite");
  for (auto* s : {calibrate, sample, residuals, sweep, dump, check}) add_common(s, f);
  for (auto* s : {sample, residuals, dump}) s->add_option("--table", f.table, "coefficient table to use");
  for (auto* s : {sample, residuals, sweep, dump})
    s->add_option("--tables", f.tables, "directory of stored tables (<variant>_nfe<k>.json)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    if (calibrate->parsed()) return cmd_calibrate(f);
    if (sample->parsed()) return cmd_sample(f);
    if (residuals->parsed()) return cmd_residuals(f);
    if (sweep->parsed()) return cmd_sweep(f);
    if (dump->parsed()) return cmd_dump_coeffs(f);
    if (check->parsed()) return cmd_check(f);
  } catch (const std::exception& e) {
    std::cerr << "iia: error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
