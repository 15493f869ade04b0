// SPDX-License-Identifier: Apache-2.0
//
// Improved integration approximation: per-step least-squares calibration of
// solver coefficients against a fine-grained run of the same solver.
//
// For every calibrated step the coarse update is modelled as
//
//   z_{i+1} = z_i + carried_i + sum_j c_j f_j
//
// where `carried` is zero for the EDM variants (the whole increment is
// coefficient-weighted) and the baseline increment for the additive variants
// (DDIM, DPM-Solver, PNDM). The target is the sum of fine-grained increments
// over the same slot.
#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "iia/common.hpp"
#include "iia/least_squares.hpp"
#include "iia/parallel.hpp"
#include "iia/rng.hpp"
#include "iia/schedule.hpp"
#include "iia/score.hpp"
#include "iia/solvers.hpp"

namespace iia {

inline constexpr int kTableVersion = 1;

enum class Variant { biia_edm, iia_edm, iia_ddim, iia_ddim_guided, iia_dpm2m, iia_spndm, iia_ipndm };

inline constexpr Variant kAllVariants[] = {Variant::biia_edm,  Variant::iia_edm,   Variant::iia_ddim,
                                           Variant::iia_ddim_guided, Variant::iia_dpm2m, Variant::iia_spndm,
                                           Variant::iia_ipndm};

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::biia_edm: return "biia_edm";
    case Variant::iia_edm: return "iia_edm";
    case Variant::iia_ddim: return "iia_ddim";
    case Variant::iia_ddim_guided: return "iia_ddim_guided";
    case Variant::iia_dpm2m: return "iia_dpm2m";
    case Variant::iia_spndm: return "iia_spndm";
    case Variant::iia_ipndm: return "iia_ipndm";
  }
  return "?";
}

inline std::optional<Variant> try_parse_variant(std::string_view s) {
  for (Variant v : kAllVariants)
    if (to_string(v) == s) return v;
  return std::nullopt;
}

inline Variant parse_variant(std::string_view s) {
  if (auto v = try_parse_variant(s)) return *v;
  throw std::invalid_argument("unknown IIA variant '" + std::string(s) + "'");
}

inline Solver base_solver(Variant v) {
  switch (v) {
    case Variant::biia_edm:
    case Variant::iia_edm: return Solver::heun;
    case Variant::iia_ddim:
    case Variant::iia_ddim_guided: return Solver::ddim;
    case Variant::iia_dpm2m: return Solver::dpm2m;
    case Variant::iia_spndm: return Solver::spndm;
    case Variant::iia_ipndm: return Solver::ipndm;
  }
  throw std::logic_error("base_solver: unknown variant");
}

inline bool is_additive(Variant v) { return v != Variant::biia_edm && v != Variant::iia_edm; }
inline bool is_guided(Variant v) { return v == Variant::iia_ddim_guided; }

/// Number of coefficients at step i. Terminal (sigma(t_{i+1}) = 0) steps and
/// warm-up steps without history carry none.
inline std::size_t feature_count(Variant v, std::size_t r, std::size_t i, bool terminal) {
  if (terminal) return 0;
  const std::size_t ri = std::min(r, i);
  switch (v) {
    case Variant::biia_edm: return ri + 1;
    case Variant::iia_edm: return 2 * (ri + 1);
    case Variant::iia_ddim:
    case Variant::iia_spndm:
    case Variant::iia_ipndm: return i >= 1 ? 2 : 0;
    case Variant::iia_ddim_guided: return 1;
    case Variant::iia_dpm2m: return 2;
  }
  return 0;
}

/// Records needed per trajectory: the current step plus r earlier ones, and
/// IPNDM's three prior noises.
inline std::size_t history_depth(std::size_t r) { return std::max<std::size_t>(r, 3) + 1; }

namespace detail {
inline const StepRecord& earlier(const StepRecord& current, const History& prev, std::size_t k) {
  return k == 0 ? current : prev.back(k - 1);
}
}  // namespace detail

/// Ordered feature vectors at the current step. `prev` holds the records of
/// earlier steps of the same trajectory (newest last).
///
///   biia_edm   {(d_{i-k} + d'_{i-k+1|i-k}) / 2}_k
///   iia_edm    {z_{i-k} - D_{i-k}, D_{i-k} - D(z~_{i-k+1})}_k, interleaved
///   iia_ddim   {x_i - x_{i-1}, eps_i - eps_{i-1}}
///   guided     {eps_i} (the guided noise)
///   iia_dpm2m  {z_i, x_i}
///   PNDM       {x_[i] - x_[i-1], eps~_[i] - eps~_[i-1]}
inline FeatureSet assemble_features(Variant v, std::size_t r, const StepRecord& current, const History& prev,
                                    bool terminal = false) {
  const std::size_t n = feature_count(v, r, current.i, terminal);
  FeatureSet out;
  if (n == 0) return out;
  out.reserve(n);
  switch (v) {
    case Variant::biia_edm: {
      for (std::size_t k = 0; k < n; ++k) {
        const auto& rec = detail::earlier(current, prev, k);
        out.push_back(0.5 * (StepRecord::need(rec.drift, "drift") + StepRecord::need(rec.drift_pred, "drift_pred")));
      }
      break;
    }
    case Variant::iia_edm: {
      for (std::size_t k = 0; k < n / 2; ++k) {
        const auto& rec = detail::earlier(current, prev, k);
        const Vec& den = StepRecord::need(rec.denoised, "denoised");
        out.push_back(StepRecord::need(rec.z, "z") - den);
        out.push_back(den - StepRecord::need(rec.denoised_pred, "denoised_pred"));
      }
      break;
    }
    case Variant::iia_ddim: {
      const auto& p = prev.back();
      out.push_back(StepRecord::need(current.x_hat, "x_hat") - StepRecord::need(p.x_hat, "x_hat"));
      out.push_back(StepRecord::need(current.noise, "noise") - StepRecord::need(p.noise, "noise"));
      break;
    }
    case Variant::iia_ddim_guided:
      out.push_back(StepRecord::need(current.noise, "noise"));
      break;
    case Variant::iia_dpm2m:
      out.push_back(StepRecord::need(current.z, "z"));
      out.push_back(StepRecord::need(current.x_hat, "x_hat"));
      break;
    case Variant::iia_spndm:
    case Variant::iia_ipndm: {
      const auto& p = prev.back();
      out.push_back(StepRecord::need(current.x_hat, "x_hat") - StepRecord::need(p.x_hat, "x_hat"));
      out.push_back(StepRecord::need(current.eps_tilde, "eps_tilde") - StepRecord::need(p.eps_tilde, "eps_tilde"));
      break;
    }
  }
  return out;
}

/// Coefficients under which the IIA update equals the baseline step.
///
/// biia_edm: (t_{i+1} - t_i, 0, ...). iia_edm: the two Heun step sizes
/// (h / t_i, h / (2 t_{i+1})) on the k = 0 pair. Additive variants: zeros.
inline Vec baseline_coefficients(Variant v, std::size_t count, double t, double tn) {
  Vec c = Vec::Zero(static_cast<Eigen::Index>(count));
  if (count == 0) return c;
  const double h = tn - t;
  if (v == Variant::biia_edm) {
    c[0] = h;
  } else if (v == Variant::iia_edm) {
    c[0] = h / t;
    c[1] = h / (2.0 * tn);
  }
  return c;
}

struct IiaStepResult {
  StepResult base;     // baseline step (record, baseline next state)
  FeatureSet features;
  Vec carried;         // baseline part kept outside the coefficient model
  Vec z_next;
};

/// One IIA step. Empty `coeffs` on a step that has no features reproduces the
/// baseline; a non-empty vector must match the feature count.
template <ScoreModel M>
IiaStepResult iia_step(Variant v, std::size_t r, const M& model, const Vec& z, std::size_t i, double t, double tn,
                       const NoiseParam& param, const Condition& cond, const History& prev,
                       const std::optional<Vec>& coeffs) {
  if (v == Variant::iia_edm && param.kind != ParamKind::ve)
    throw std::invalid_argument("iia_edm requires the VE parameterization");
  IiaStepResult out;
  out.base = baseline_step(base_solver(v), model, z, i, t, tn, param, cond, prev);
  const bool terminal = param.sigma(tn) == 0.0;
  out.features = assemble_features(v, r, out.base.record, prev, terminal);
  out.carried = is_additive(v) ? out.base.increment : Vec(Vec::Zero(z.size()));
  if (!coeffs) {
    out.z_next = out.base.z_next;
    return out;
  }
  if (static_cast<std::size_t>(coeffs->size()) != out.features.size())
    throw std::invalid_argument("iia_step: coefficient count " + std::to_string(coeffs->size()) +
                                " does not match feature count " + std::to_string(out.features.size()) + " at step " +
                                std::to_string(i));
  if (out.features.empty()) {
    out.z_next = out.base.z_next;
    return out;
  }
  Vec combo = combine_features(out.features, *coeffs, z.size());
  out.z_next = is_additive(v) ? Vec(out.base.z_next + combo) : Vec(z + combo);
  return out;
}

/// Grid-indexed form; `prev` are the earlier records of this trajectory.
template <ScoreModel M>
DiffusionState iia_step(Variant v, std::size_t r, const M& model, const DiffusionState& state, const TimeGrid& grid,
                        const History& prev, const Vec& coeffs, const Condition& cond = {}) {
  if (state.i >= grid.steps()) throw std::out_of_range("iia_step: step index out of range");
  auto res = iia_step(v, r, model, state.z, state.i, grid[state.i], grid[state.i + 1], grid.param(), cond, prev,
                      std::optional<Vec>(coeffs));
  return {std::move(res.z_next), state.i + 1, grid[state.i + 1]};
}

/// Sum of the baseline solver's increments over M uniform sub-slots of
/// [t, tn], starting from z. Multistep solvers continue from the coarse
/// trajectory's history, so M = 1 returns the coarse increment exactly.
template <ScoreModel M>
Vec fine_oracle(Solver solver, const M& model, const Vec& z, std::size_t i, double t, double tn,
                const NoiseParam& param, const Condition& cond, const History& prev, std::size_t M_refine) {
  const auto times = refine_slot(t, tn, M_refine);
  History local = prev;
  Vec zm = z;
  Vec total = Vec::Zero(z.size());
  for (std::size_t m = 0; m < M_refine; ++m) {
    StepResult s = baseline_step(solver, model, zm, i, times[m], times[m + 1], param, cond, local);
    total += s.increment;
    zm = std::move(s.z_next);
    local.push(std::move(s.record));
  }
  return total;
}

template <ScoreModel M>
Vec fine_oracle(Variant v, const M& model, const Vec& z, std::size_t i, const TimeGrid& grid, const Condition& cond,
                const History& prev, std::size_t M_refine) {
  if (i >= grid.steps()) throw std::out_of_range("fine_oracle: step index out of range");
  return fine_oracle(base_solver(v), model, z, i, grid[i], grid[i + 1], grid.param(), cond, prev, M_refine);
}

// ---------------------------------------------------------------------------
// Coefficient tables
// ---------------------------------------------------------------------------

struct StepCoefficients {
  std::size_t i = 0;
  std::vector<double> coeffs;  // empty on uncalibrated steps
  bool degenerate = false;
  bool ridge = false;
  double condition = 0.0;
  double baseline_mse = 0.0;  // batch mean ||baseline increment - fine target||^2
  double iia_mse = 0.0;       // same for the calibrated increment
};

struct CoefficientTable {
  int version = kTableVersion;
  Variant variant = Variant::iia_edm;
  std::size_t M = 3;
  std::size_t r = 1;
  std::size_t batch_size = 0;
  std::uint64_t seed = 0;
  std::string model_id;
  double guidance_scale = 0.0;
  std::string trajectory = "iia";
  NoiseParam param;
  std::vector<double> grid_times;
  std::string grid_hash;
  std::vector<StepCoefficients> steps;

  /// biia_edm stores c = (t_{i+1} - t_i) gamma internally; this reports gamma.
  std::vector<double> reported_coefficients(std::size_t i) const {
    const auto& s = steps.at(i);
    std::vector<double> out = s.coeffs;
    if (variant == Variant::biia_edm && !out.empty()) {
      const double h = grid_times.at(i + 1) - grid_times.at(i);
      for (double& c : out) c /= h;
    }
    return out;
  }

  TimeGrid grid() const { return TimeGrid(grid_times, param); }

  std::optional<Vec> coefficients_at(std::size_t i) const {
    const auto& s = steps.at(i);
    if (s.coeffs.empty()) return std::nullopt;
    return Eigen::Map<const Vec>(s.coeffs.data(), static_cast<Eigen::Index>(s.coeffs.size()));
  }

  /// Throws unless every coefficient is finite and every step carries the
  /// expected number of coefficients.
  void validate() const {
    if (steps.size() + 1 != grid_times.size())
      throw std::invalid_argument("coefficient table: step count does not match grid");
    for (std::size_t i = 0; i < steps.size(); ++i) {
      if (steps[i].i != i) throw std::invalid_argument("coefficient table: step " + std::to_string(i) + " out of order");
      const bool terminal = param.sigma(grid_times[i + 1]) == 0.0;
      const std::size_t want = feature_count(variant, r, i, terminal);
      if (steps[i].coeffs.size() != want)
        throw std::invalid_argument("coefficient table: step " + std::to_string(i) + " has " +
                                    std::to_string(steps[i].coeffs.size()) + " coefficients, expected " +
                                    std::to_string(want));
      for (double c : steps[i].coeffs)
        if (!std::isfinite(c))
          throw std::invalid_argument("coefficient table: non-finite coefficient at step " + std::to_string(i));
    }
  }
};

/// Initial states and (for guided runs) per-sample condition labels.
struct CalibrationBatch {
  std::vector<Vec> z0;
  std::vector<Condition> conditions;
  std::uint64_t seed = 0;

  std::size_t size() const { return z0.size(); }
};

/// z0 ~ N(0, sigma(t_0)^2 I) on the calibration stream. When `labels` is
/// non-empty a condition set of `condition_set_size` labels is drawn from it
/// and every sample is paired with an independent draw from that set.
inline CalibrationBatch make_calibration_batch(Eigen::Index dim, const TimeGrid& grid, std::size_t size,
                                               std::uint64_t seed, const std::vector<std::string>& labels = {},
                                               std::size_t condition_set_size = 20,
                                               Stream stream = Stream::calibration) {
  if (size == 0) throw std::invalid_argument("calibration batch: size must be >= 1");
  CalibrationBatch batch;
  batch.seed = seed;
  const double s0 = grid.param().sigma(grid[0]);
  std::vector<std::string> cond_set;
  if (!labels.empty()) {
    auto eng = keyed_engine(seed, stream, Lane::label, 0);
    std::uniform_int_distribution<std::size_t> pick(0, labels.size() - 1);
    for (std::size_t k = 0; k < condition_set_size; ++k) cond_set.push_back(labels[pick(eng)]);
  }
  for (std::size_t b = 0; b < size; ++b) {
    auto eng = keyed_engine(seed, stream, Lane::noise, b);
    batch.z0.push_back(s0 * standard_normal(eng, dim));
    if (cond_set.empty()) {
      batch.conditions.push_back(Condition::null());
    } else {
      auto leng = keyed_engine(seed, stream, Lane::label, b + 1);
      std::uniform_int_distribution<std::size_t> pick(0, cond_set.size() - 1);
      batch.conditions.push_back(Condition::of(cond_set[pick(leng)]));
    }
  }
  return batch;
}

enum class TrajectoryPolicy { iia, baseline };

struct CalibrationOptions {
  std::size_t M = 3;
  std::size_t r = 1;
  TrajectoryPolicy trajectory = TrajectoryPolicy::iia;
  unsigned workers = 1;
  std::string model_id = "model";
  double guidance_scale = 0.0;
};

/// Sequential greedy calibration over the grid. At each step every batch
/// trajectory takes its baseline step, features and fine-grained targets are
/// collected, the least-squares problem is solved on the deviation from the
/// baseline coefficients, and the trajectories advance with the new
/// coefficients (or the baseline, per `trajectory`).
template <ScoreModel M>
CoefficientTable calibrate(Variant v, const M& model, const TimeGrid& grid, const CalibrationBatch& batch,
                           const CalibrationOptions& opt) {
  if (opt.M < 1) throw std::invalid_argument("calibrate: M must be >= 1");
  if (batch.size() == 0) throw std::invalid_argument("calibrate: empty batch");
  if (batch.conditions.size() != batch.size()) throw std::invalid_argument("calibrate: one condition per sample");
  if (v == Variant::iia_edm && grid.param().kind != ParamKind::ve)
    throw std::invalid_argument("calibrate: iia_edm requires the VE parameterization");
  for (const auto& z : batch.z0)
    if (z.size() != model.dim()) throw std::invalid_argument("calibrate: batch dimension does not match the model");

  const std::size_t B = batch.size();
  const std::size_t N = grid.steps();
  const NoiseParam& param = grid.param();
  const Eigen::Index dim = model.dim();

  CoefficientTable table;
  table.variant = v;
  table.M = opt.M;
  table.r = opt.r;
  table.batch_size = B;
  table.seed = batch.seed;
  table.model_id = opt.model_id;
  table.guidance_scale = opt.guidance_scale;
  table.trajectory = opt.trajectory == TrajectoryPolicy::iia ? "iia" : "baseline";
  table.param = param;
  table.grid_times = grid.times();
  table.grid_hash = grid_hash(grid);

  std::vector<Vec> z = batch.z0;
  std::vector<History> hist(B, History(history_depth(opt.r)));
  std::vector<IiaStepResult> work(B);
  std::vector<Vec> targets(B);

  for (std::size_t i = 0; i < N; ++i) {
    const double t = grid[i], tn = grid[i + 1];
    const bool terminal = grid.terminal_slot(i);
    const std::size_t n = feature_count(v, opt.r, i, terminal);
    if (n > 0 && B * static_cast<std::size_t>(dim) < n)
      throw std::invalid_argument("calibrate: batch too small for " + std::to_string(n) + " features");

    parallel_for(B, opt.workers, [&](std::size_t b) {
      work[b] = iia_step(v, opt.r, model, z[b], i, t, tn, param, batch.conditions[b], hist[b], std::nullopt);
      if (n > 0)
        targets[b] = fine_oracle(base_solver(v), model, z[b], i, t, tn, param, batch.conditions[b], hist[b], opt.M);
    });

    StepCoefficients sc;
    sc.i = i;
    std::optional<Vec> coeffs;
    if (n > 0) {
      const Vec c_base = baseline_coefficients(v, n, t, tn);
      std::vector<FeatureSet> feats(B);
      std::vector<Vec> deviation(B);
      for (std::size_t b = 0; b < B; ++b) {
        feats[b] = work[b].features;
        deviation[b] = targets[b] - work[b].carried - combine_features(feats[b], c_base, dim);
      }
      LeastSquaresResult ls = solve_least_squares(feats, deviation);
      Vec c = c_base + ls.coeffs;
      sc.coeffs.assign(c.data(), c.data() + c.size());
      sc.degenerate = ls.degenerate;
      sc.ridge = ls.ridge;
      sc.condition = ls.condition;
      double base_sq = 0.0, iia_sq = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        base_sq += (work[b].base.increment - targets[b]).squaredNorm();
        iia_sq += (work[b].carried + combine_features(feats[b], c, dim) - targets[b]).squaredNorm();
      }
      sc.baseline_mse = base_sq / static_cast<double>(B);
      sc.iia_mse = iia_sq / static_cast<double>(B);
      coeffs = std::move(c);
    }
    table.steps.push_back(std::move(sc));

    const bool follow_iia = opt.trajectory == TrajectoryPolicy::iia && coeffs.has_value();
    parallel_for(B, opt.workers, [&](std::size_t b) {
      if (follow_iia) {
        Vec combo = combine_features(work[b].features, *coeffs, dim);
        z[b] = is_additive(v) ? Vec(work[b].base.z_next + combo) : Vec(z[b] + combo);
      } else {
        z[b] = std::move(work[b].base.z_next);
      }
      hist[b].push(std::move(work[b].base.record));
    });
  }
  return table;
}

// ---------------------------------------------------------------------------
// Trajectory runner
// ---------------------------------------------------------------------------

struct SampleResult {
  DiffusionState terminal;
  std::vector<StepRecord> records;
  std::size_t nfe = 0;
};

/// Runs the solver over the whole grid. With a table, the IIA update of the
/// table's variant replaces the baseline combination at every step that has
/// coefficients.
template <ScoreModel M>
SampleResult run_sampler(Solver solver, const M& model, const TimeGrid& grid, const Vec& z0, const Condition& cond = {},
                         const CoefficientTable* table = nullptr) {
  if (z0.size() != model.dim()) throw std::invalid_argument("run_sampler: z0 dimension does not match the model");
  if (table) {
    if (base_solver(table->variant) != solver)
      throw std::invalid_argument("run_sampler: table variant " + std::string(to_string(table->variant)) +
                                  " does not extend solver " + std::string(to_string(solver)));
    if (table->grid_hash != grid_hash(grid))
      throw std::invalid_argument("run_sampler: coefficient table grid hash mismatch");
    if (table->steps.size() != grid.steps()) throw std::invalid_argument("run_sampler: table step count mismatch");
  }
  const std::size_t r = table ? table->r : 1;
  History hist(history_depth(r));
  SampleResult out;
  Vec z = z0;
  for (std::size_t i = 0; i < grid.steps(); ++i) {
    const double t = grid[i], tn = grid[i + 1];
    StepRecord rec;
    if (table) {
      auto res = iia_step(table->variant, r, model, z, i, t, tn, grid.param(), cond, hist, table->coefficients_at(i));
      z = std::move(res.z_next);
      rec = std::move(res.base.record);
    } else {
      auto res = baseline_step(solver, model, z, i, t, tn, grid.param(), cond, hist);
      z = std::move(res.z_next);
      rec = std::move(res.record);
    }
    out.nfe += rec.nfe;
    hist.push(rec);
    out.records.push_back(std::move(rec));
  }
  out.terminal = {std::move(z), grid.steps(), grid.times().back()};
  return out;
}

}  // namespace iia
