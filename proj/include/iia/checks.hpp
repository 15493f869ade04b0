// SPDX-License-Identifier: Apache-2.0
//
// Executable invariant suite. Each check runs a seeded experiment and
// reports pass/fail with the measured quantity.
#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "iia/campaign.hpp"
#include "iia/config.hpp"
#include "iia/iia.hpp"
#include "iia/least_squares.hpp"
#include "iia/metrics.hpp"
#include "iia/random_models.hpp"
#include "iia/table_io.hpp"

namespace iia::checks {

struct CheckResult {
  int id = 0;
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

inline CheckResult timed(int id, std::string name, const std::function<bool(std::ostringstream&)>& body) {
  CheckResult r;
  r.id = id;
  r.name = std::move(name);
  std::ostringstream detail;
  detail.precision(3);
  const auto start = std::chrono::steady_clock::now();
  try {
    r.passed = body(detail);
  } catch (const std::exception& e) {
    r.passed = false;
    detail << "exception: " << e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  r.detail = detail.str();
  return r;
}

inline double rel_diff(const Vec& a, const Vec& b) { return (a - b).norm() / std::max(b.norm(), 1e-300); }

// ---------------------------------------------------------------------------

inline CheckResult reformulated_heun_equivalence(std::size_t draws = 1000, std::uint64_t seed = 11) {
  return timed(1, "reformulated_heun_equivalence", [&](std::ostringstream& out) {
    std::mt19937_64 eng(seed);
    double worst = 0.0;
    for (std::size_t k = 0; k < draws; ++k) {
      const Eigen::Index dim = static_cast<Eigen::Index>(gen::uniform_index(eng, 1, 4));
      const GaussianMixture gm = gen::mixture(eng, dim);
      const double t = gen::log_uniform(eng, 0.01, 80.0);
      const double tn = t * gen::uniform(eng, 0.05, 0.95);
      const Vec z = gen::normal_vec(eng, dim, std::sqrt(t * t + 4.0));
      const Condition cond = gen::uniform(eng, 0.0, 1.0) < 0.5 ? Condition::null() : Condition::of("class0");
      const NoiseParam p = NoiseParam::ve();
      const Vec a = reformulated_heun_kernel(gm, z, t, tn, p, cond);
      const Vec b = heun_kernel(gm, z, 0, t, tn, p, cond).z_next;
      worst = std::max(worst, rel_diff(a, b));
    }
    out << "max rel err " << worst << " over " << draws << " draws";
    return worst <= 1e-10;
  });
}

/// Default grid for a variant at N steps.
inline TimeGrid default_grid(Variant v, std::size_t steps = 8) {
  ExperimentConfig c = default_config(v);
  return grid_with_steps(c, steps);
}

inline CheckResult baseline_embedding(std::size_t states = 100, std::uint64_t seed = 12) {
  return timed(2, "baseline_embedding", [&](std::ostringstream& out) {
    bool ok = true;
    for (Variant v : kAllVariants) {
      std::mt19937_64 eng(seed + static_cast<std::uint64_t>(v));
      const TimeGrid grid = default_grid(v, 8);
      const std::size_t r = gen::uniform_index(eng, 0, 2);
      double worst = 0.0;
      for (std::size_t s = 0; s < states; ++s) {
        const GaussianMixture gm = gen::mixture(eng, 2);
        const double w = gen::uniform(eng, 1.0, 5.0);
        const Guided<GaussianMixture> guided(gm, w);
        const Condition cond = is_guided(v) ? Condition::of("class0") : Condition::null();
        std::vector<std::size_t> candidates;
        for (std::size_t i = 0; i < grid.steps(); ++i)
          if (feature_count(v, r, i, grid.terminal_slot(i)) > 0) candidates.push_back(i);
        const std::size_t target = candidates[gen::uniform_index(eng, 0, candidates.size() - 1)];
        Vec z = gen::normal_vec(eng, 2, grid.param().sigma(grid[0]));
        auto compare = [&](const auto& model) {
          History hist(history_depth(r));
          for (std::size_t i = 0; i < target; ++i) {
            auto res = baseline_step(base_solver(v), model, z, i, grid[i], grid[i + 1], grid.param(), cond, hist);
            z = res.z_next;
            hist.push(std::move(res.record));
          }
          const std::size_t n = feature_count(v, r, target, false);
          const Vec c = baseline_coefficients(v, n, grid[target], grid[target + 1]);
          auto iia = iia_step(v, r, model, z, target, grid[target], grid[target + 1], grid.param(), cond, hist,
                              std::optional<Vec>(c));
          auto base = baseline_step(base_solver(v), model, z, target, grid[target], grid[target + 1], grid.param(),
                                    cond, hist);
          return (iia.z_next - base.z_next).norm() / std::max(1.0, base.z_next.norm());
        };
        const double err = is_guided(v) ? compare(guided) : compare(gm);
        worst = std::max(worst, err);
      }
      out << to_string(v) << "=" << worst << " ";
      ok = ok && worst <= 1e-12;
    }
    return ok;
  });
}

// ---------------------------------------------------------------------------

inline CheckResult residual_dominance(std::size_t batch = 200, std::size_t M = 3, std::size_t r = 1,
                                      std::uint64_t seed = 0) {
  return timed(3, "in_sample_residual_dominance", [&](std::ostringstream& out) {
    const GaussianMixture gm = default_mixture();
    bool ok = true;
    std::size_t steps_checked = 0;
    for (Variant v : kAllVariants) {
      ExperimentConfig cfg = default_config(v);
      cfg.M = M;
      cfg.r = r;
      cfg.batch = batch;
      cfg.seed = seed;
      const TimeGrid grid = grid_with_steps(cfg, 8);
      const CoefficientTable table = calibrate_config(cfg, gm, grid);
      const CalibrationBatch calib = calibration_batch_for(cfg, gm, grid);
      auto rows = with_sampling_model(cfg, gm, [&](const auto& model) {
        return residual_curve(v, model, grid, &table, calib, M, r, 1);
      });
      double worst = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < grid.steps(); ++i) {
        if (table.steps[i].coeffs.empty()) continue;
        double base = 0.0, iia = 0.0;
        for (const auto& row : rows) {
          if (row.step != i) continue;
          (row.variant == to_string(v) ? iia : base) = row.value;
        }
        ++steps_checked;
        const double excess = (iia - base) / std::max(base, 1e-300);
        worst = std::max(worst, excess);
        if (iia > base * (1.0 + 1e-12)) ok = false;
        const auto& s = table.steps[i];
        if (s.iia_mse > s.baseline_mse * (1.0 + 1e-12)) ok = false;
      }
      out << to_string(v) << " max(iia/base-1)=" << worst << "; ";
    }
    out << steps_checked << " steps";
    return ok;
  });
}

inline CheckResult nested_dominance(std::size_t batch = 200, std::size_t M = 3, std::size_t r = 1,
                                    std::uint64_t seed = 0) {
  return timed(4, "nested_dominance_iia_vs_biia", [&](std::ostringstream& out) {
    const GaussianMixture gm = default_mixture();
    ExperimentConfig cfg = default_config(Variant::iia_edm);
    cfg.M = M;
    cfg.r = r;
    cfg.batch = batch;
    cfg.seed = seed;
    cfg.trajectory = TrajectoryPolicy::baseline;
    const TimeGrid grid = grid_with_steps(cfg, 8);
    const CoefficientTable iia_t = calibrate_config(cfg, gm, grid);
    cfg.variant = Variant::biia_edm;
    const CoefficientTable biia_t = calibrate_config(cfg, gm, grid);
    bool ok = true;
    double worst = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < grid.steps(); ++i) {
      const auto& a = iia_t.steps[i];
      const auto& b = biia_t.steps[i];
      if (a.coeffs.empty() || b.coeffs.empty()) continue;
      if (a.baseline_mse != b.baseline_mse) {
        out << "states differ at step " << i << "; ";
        ok = false;
      }
      worst = std::max(worst, (a.iia_mse - b.iia_mse) / std::max(b.iia_mse, 1e-300));
      if (a.iia_mse > b.iia_mse * (1.0 + 1e-10)) ok = false;
    }
    out << "max(iia/biia-1)=" << worst;
    return ok;
  });
}

// ---------------------------------------------------------------------------

/// Coefficients from an explicitly assembled normal-equation system
/// (stacked design matrix, full-pivot LU).
inline Vec brute_force_least_squares(const std::vector<FeatureSet>& feats, const std::vector<Vec>& targets) {
  const std::size_t n = feats.front().size();
  const Eigen::Index d = targets.front().size();
  Eigen::MatrixXd A(static_cast<Eigen::Index>(feats.size()) * d, static_cast<Eigen::Index>(n));
  Vec y(A.rows());
  for (std::size_t b = 0; b < feats.size(); ++b) {
    for (std::size_t j = 0; j < n; ++j) A.block(static_cast<Eigen::Index>(b) * d, static_cast<Eigen::Index>(j), d, 1) = feats[b][j];
    y.segment(static_cast<Eigen::Index>(b) * d, d) = targets[b];
  }
  const Eigen::MatrixXd G = A.transpose() * A;
  return G.fullPivLu().solve(A.transpose() * y);
}

inline CheckResult closed_form_gamma(std::size_t problems = 100, std::uint64_t seed = 15) {
  return timed(5, "closed_form_gamma_and_ls_oracle", [&](std::ostringstream& out) {
    std::mt19937_64 eng(seed);
    double worst_gamma = 0.0, worst_ls = 0.0;
    for (std::size_t k = 0; k < problems; ++k) {
      const std::size_t batch = gen::uniform_index(eng, 2, 50);
      const Eigen::Index dim = static_cast<Eigen::Index>(gen::uniform_index(eng, 1, 5));
      auto [f1, y1] = gen::ls_problem(eng, batch, 1, dim);
      std::vector<Vec> deltas;
      for (const auto& f : f1) deltas.push_back(f[0]);
      const double g = closed_form_gamma_r0(deltas, y1);
      const double c = solve_least_squares(f1, y1).coeffs[0];
      worst_gamma = std::max(worst_gamma, std::abs(g - c) / std::max(std::abs(g), 1e-300));

      const std::size_t n = gen::uniform_index(eng, 2, 6);
      auto [fn, yn] = gen::ls_problem(eng, batch + n, n, dim);
      const Vec mine = solve_least_squares(fn, yn).coeffs;
      const Vec oracle = brute_force_least_squares(fn, yn);
      worst_ls = std::max(worst_ls, rel_diff(mine, oracle));
    }
    out << "gamma rel err " << worst_gamma << ", multi-feature rel err " << worst_ls;
    return worst_gamma <= 1e-12 && worst_ls <= 1e-10;
  });
}

// ---------------------------------------------------------------------------

/// Heun fine-oracle error against the exact slot integral of the
/// isotropic-Gaussian flow, for M = 2, 4, 8, 16.
inline std::vector<double> oracle_errors(double t_from = 2.0, double t_to = 1.0, std::uint64_t seed = 16) {
  const GaussianMixture iso({{1.0, Vec::Zero(2), 1.0}});
  std::mt19937_64 eng(seed);
  const Vec z0 = gen::normal_vec(eng, 2, std::sqrt(1.0 + t_from * t_from));
  const Vec exact = z0 * (std::sqrt((1.0 + t_to * t_to) / (1.0 + t_from * t_from)) - 1.0);
  std::vector<double> errs;
  const History none;
  for (std::size_t M : {2u, 4u, 8u, 16u}) {
    const Vec fg = fine_oracle(Solver::heun, iso, z0, 0, t_from, t_to, NoiseParam::ve(), Condition::null(), none, M);
    errs.push_back((fg - exact).norm());
  }
  return errs;
}

inline CheckResult oracle_convergence() {
  return timed(6, "fine_oracle_second_order", [&](std::ostringstream& out) {
    const auto e = oracle_errors();
    bool ok = true;
    out << "errors";
    for (double x : e) out << " " << x;
    out << "; ratios";
    for (std::size_t k = 0; k + 1 < e.size(); ++k) {
      const double ratio = e[k] / e[k + 1];
      out << " " << ratio;
      ok = ok && e[k + 1] < e[k] && ratio >= 3.0 && ratio <= 5.0;
    }
    return ok;
  });
}

// ---------------------------------------------------------------------------

struct SweepComparison {
  std::vector<std::size_t> nfe;
  std::vector<double> baseline;
  std::vector<double> iia;
};

inline SweepComparison compare_sweep(const std::vector<MetricsRow>& rows, Variant v) {
  SweepComparison c;
  const std::string base(to_string(base_solver(v)));
  const std::string ours(to_string(v));
  for (const auto& r : rows) {
    if (r.metric != "terminal_error") continue;
    if (r.variant == base) {
      c.nfe.push_back(r.nfe);
      c.baseline.push_back(r.value);
    } else if (r.variant == ours) {
      c.iia.push_back(r.value);
    }
  }
  return c;
}

inline CheckResult terminal_improvement(std::size_t eval_samples = 2048, unsigned workers = 1) {
  return timed(7, "small_nfe_terminal_error", [&](std::ostringstream& out) {
    const GaussianMixture gm = default_mixture();
    bool ok = true;
    for (Variant v : {Variant::iia_edm, Variant::iia_ddim}) {
      ExperimentConfig cfg = default_config(v);
      cfg.eval_samples = eval_samples;
      cfg.workers = workers;
      cfg.nfe = {7, 9, 11, 13};
      const auto rows = run_sweep(cfg, gm, calibrating_provider(cfg, gm));
      const auto c = compare_sweep(rows, v);
      out << to_string(v) << ":";
      for (std::size_t k = 0; k < c.nfe.size(); ++k) {
        out << " nfe" << c.nfe[k] << " " << c.baseline[k] << "->" << c.iia[k] << " ("
            << 100.0 * (c.baseline[k] - c.iia[k]) / c.baseline[k] << "%)";
        ok = ok && c.iia[k] <= c.baseline[k];
      }
      out << "; ";
    }
    return ok;
  });
}

inline CheckResult default_hyperparameters() {
  return timed(8, "default_hyperparameters", [&](std::ostringstream& out) {
    bool ok = true;
    for (Variant v : kAllVariants) {
      const auto c = default_config(v);
      const std::size_t want_M = is_guided(v) ? 10 : 3;
      ok = ok && c.M == want_M && c.r == 1;
    }
    ok = ok && default_config(Variant::biia_edm).batch == 200 && default_config(Variant::iia_edm).batch == 200;
    ok = ok && default_config(Variant::iia_ddim).batch == 16;
    ok = ok && default_config(Variant::iia_ddim_guided).condition_set_size == 20;
    ok = ok && CalibrationOptions{}.M == 3 && CalibrationOptions{}.r == 1;
    ok = ok && default_config(Variant::iia_edm).eval_samples == 2048;
    out << "(M,r)=(3,1), |B|=200/16, guided M=10, condition set 20";
    return ok;
  });
}

inline CheckResult determinism(std::size_t batch = 200, std::size_t eval_samples = 128) {
  return timed(9, "determinism_across_workers", [&](std::ostringstream& out) {
    const GaussianMixture gm = default_mixture();
    bool ok = true;
    for (Variant v : {Variant::iia_edm, Variant::iia_ipndm, Variant::iia_ddim_guided}) {
      ExperimentConfig cfg = default_config(v);
      cfg.batch = std::min(cfg.batch, batch);
      cfg.eval_samples = eval_samples;
      cfg.nfe = {9};
      std::vector<std::string> tables, csvs;
      for (unsigned w : {1u, 3u}) {
        cfg.workers = w;
        std::string tab;
        const auto rows = run_sweep(cfg, gm, calibrating_provider(cfg, gm),
                                    [&](std::size_t, const CoefficientTable& t) { tab = table_to_string(t); });
        tables.push_back(tab);
        csvs.push_back(metrics_csv(rows));
      }
      const bool same = tables[0] == tables[1] && csvs[0] == csvs[1];
      out << to_string(v) << (same ? " identical; " : " DIFFERS; ");
      ok = ok && same;
    }
    return ok;
  });
}

// ---------------------------------------------------------------------------

/// Self-normalized importance estimate of E[x | z] with the data
/// distribution as proposal. Returns the estimate and its standard error.
template <class Engine>
std::pair<Vec, double> monte_carlo_posterior_mean(const GaussianMixture& gm, const Vec& z, double alpha, double sigma,
                                                  std::size_t samples, Engine& eng) {
  std::vector<Vec> xs(samples);
  std::vector<double> logw(samples);
  double max_lw = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < samples; ++k) {
    xs[k] = sample_mixture(gm, eng);
    logw[k] = -0.5 * (z - alpha * xs[k]).squaredNorm() / (sigma * sigma);
    max_lw = std::max(max_lw, logw[k]);
  }
  double sw = 0.0;
  Vec num = Vec::Zero(z.size());
  std::vector<double> w(samples);
  for (std::size_t k = 0; k < samples; ++k) {
    w[k] = std::exp(logw[k] - max_lw);
    sw += w[k];
    num += w[k] * xs[k];
  }
  const Vec mean = num / sw;
  double var = 0.0;
  for (std::size_t k = 0; k < samples; ++k) var += w[k] * w[k] * (xs[k] - mean).squaredNorm();
  return {mean, std::sqrt(var) / sw};
}

inline CheckResult score_model_correctness(std::size_t configs = 20, std::size_t mc_samples = 200000,
                                           std::uint64_t seed = 20) {
  return timed(10, "score_model_correctness", [&](std::ostringstream& out) {
    std::mt19937_64 eng(seed);
    double worst_fd = 0.0, worst_tweedie = 0.0, worst_mc = 0.0;
    for (std::size_t k = 0; k < configs; ++k) {
      const Eigen::Index dim = static_cast<Eigen::Index>(gen::uniform_index(eng, 1, 3));
      const GaussianMixture gm = gen::mixture(eng, dim, 4, 2.0);
      const NoiseParam p = k % 2 == 0 ? NoiseParam::ve() : NoiseParam::vp();
      const double t = p.kind == ParamKind::ve ? gen::uniform(eng, 0.5, 3.0) : gen::uniform(eng, 0.2, 0.6);
      const double a = p.alpha(t), s = p.sigma(t);
      std::mt19937_64 draw(seed * 1000 + k);
      const Vec z = a * sample_mixture(gm, draw) + s * gen::normal_vec(eng, dim);

      const Vec score = gm_score(gm, z, a, s);
      Vec fd(dim);
      for (Eigen::Index j = 0; j < dim; ++j) {
        const double h = 1e-5 * std::max(1.0, std::abs(z[j]));
        Vec zp = z, zm = z;
        zp[j] += h;
        zm[j] -= h;
        fd[j] = (gm_log_density(gm, zp, a, s) - gm_log_density(gm, zm, a, s)) / (2.0 * h);
      }
      worst_fd = std::max(worst_fd, rel_diff(fd, score));

      const Vec den = gm_denoiser_at(gm, z, a, s);
      const Vec tweedie = (z + s * s * score) / a;
      worst_tweedie = std::max(worst_tweedie, rel_diff(den, tweedie));

      auto [mc, se] = monte_carlo_posterior_mean(gm, z, a, s, mc_samples, draw);
      worst_mc = std::max(worst_mc, (den - mc).norm() / se);
    }
    out << "fd rel " << worst_fd << ", tweedie rel " << worst_tweedie << ", mc max |diff|/stderr " << worst_mc;
    return worst_fd <= 1e-5 && worst_tweedie <= 1e-9 && worst_mc <= 3.0;
  });
}

}  // namespace iia::checks
