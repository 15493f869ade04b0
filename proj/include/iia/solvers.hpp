// SPDX-License-Identifier: Apache-2.0
//
// Baseline probability-flow ODE steppers: Heun (EDM), DDIM, multistep
// second-order DPM-Solver, SPNDM and IPNDM. Steppers are stateless; multistep
// history is passed in explicitly.
#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <deque>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "iia/common.hpp"
#include "iia/schedule.hpp"
#include "iia/score.hpp"

namespace iia {

enum class Solver { heun, ddim, dpm2m, spndm, ipndm };

inline std::string_view to_string(Solver s) {
  switch (s) {
    case Solver::heun: return "edm";
    case Solver::ddim: return "ddim";
    case Solver::dpm2m: return "dpm2m";
    case Solver::spndm: return "spndm";
    case Solver::ipndm: return "ipndm";
  }
  return "?";
}

inline Solver parse_solver(std::string_view s) {
  if (s == "edm" || s == "heun") return Solver::heun;
  if (s == "ddim" || s == "ddim_guided") return Solver::ddim;
  if (s == "dpm2m") return Solver::dpm2m;
  if (s == "spndm") return Solver::spndm;
  if (s == "ipndm") return Solver::ipndm;
  throw std::invalid_argument("unknown solver '" + std::string(s) + "'");
}

struct DiffusionState {
  Vec z;
  std::size_t i = 0;
  double t = 0.0;
};

/// Per-step terms produced by a stepper. Which fields are set depends on the
/// solver; reading an unset field throws.
struct StepRecord {
  std::size_t i = 0;
  double t = 0.0;
  double t_next = 0.0;
  std::size_t nfe = 0;

  std::optional<Vec> z;              // state at t
  std::optional<Vec> z_pred;         // Euler-predicted state at t_next (Heun)
  std::optional<Vec> drift;          // d(z, t)
  std::optional<Vec> drift_pred;     // d(z_pred, t_next)
  std::optional<Vec> denoised;       // D(z, t)
  std::optional<Vec> denoised_pred;  // D(z_pred, t_next)
  std::optional<Vec> noise;          // raw noise prediction at z (guided if the model is)
  std::optional<Vec> eps_tilde;      // combined noise the update used
  std::optional<Vec> x_hat;          // data estimate the update used

  static const Vec& need(const std::optional<Vec>& f, std::string_view name) {
    if (!f) throw std::logic_error("StepRecord: field '" + std::string(name) + "' is not populated for this solver");
    return *f;
  }
};

struct StepResult {
  Vec z_next;
  Vec increment;  // z_next - z as the solver forms it
  StepRecord record;
};

/// Most recent records of one trajectory, newest last.
class History {
 public:
  explicit History(std::size_t depth = 4) : depth_(depth) {}

  void push(StepRecord rec) {
    records_.push_back(std::move(rec));
    while (records_.size() > depth_) records_.pop_front();
  }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  /// k = 0 is the newest record.
  const StepRecord& back(std::size_t k = 0) const {
    if (k >= records_.size()) throw std::out_of_range("History: not enough records");
    return records_[records_.size() - 1 - k];
  }
  std::size_t depth() const { return depth_; }

 private:
  std::size_t depth_;
  std::deque<StepRecord> records_;
};

/// Probability-flow drift dz/dt.
///
/// General form: (alpha'/alpha + st'/st) z - (st' alpha / st) D with
/// st = sigma / alpha. Under VE this is (z - D) / t.
inline Vec drift_from_denoised(const Vec& z, const Vec& denoised, double t, const NoiseParam& param) {
  if (param.kind == ParamKind::ve) {
    if (t <= 0.0) throw std::domain_error("ode_drift: t must be > 0 under VE");
    return (z - denoised) / t;
  }
  const double st = param.sigma_tilde(t);
  if (!(st > 0.0)) throw std::domain_error("ode_drift: sigma(t) must be > 0");
  const double st_dot = param.sigma_tilde_dot(t);
  const double a = param.log_alpha_dot(t) + st_dot / st;
  const double b = st_dot * param.alpha(t) / st;
  return a * z - b * denoised;
}

template <ScoreModel M>
Vec ode_drift(const M& model, const Vec& z, double t, const NoiseParam& param, const Condition& cond) {
  if (param.kind == ParamKind::ve && t <= 0.0) throw std::domain_error("ode_drift: t must be > 0 under VE");
  return drift_from_denoised(z, model.predict(z, t, param, cond).denoised, t, param);
}

// ---------------------------------------------------------------------------
// Heun / improved Euler
// ---------------------------------------------------------------------------

template <ScoreModel M>
StepResult heun_kernel(const M& model, const Vec& z, std::size_t i, double t, double tn, const NoiseParam& param,
                       const Condition& cond) {
  StepRecord rec;
  rec.i = i;
  rec.t = t;
  rec.t_next = tn;
  const double h = tn - t;
  Vec den = model.predict(z, t, param, cond).denoised;
  Vec d = drift_from_denoised(z, den, t, param);
  Vec z_pred = z + h * d;
  rec.nfe = 1;
  rec.z = z;
  rec.denoised = den;
  rec.drift = d;
  rec.z_pred = z_pred;
  if (param.sigma(tn) == 0.0) {
    // Euler-only terminal step
    Vec inc = h * d;
    return {std::move(z_pred), std::move(inc), std::move(rec)};
  }
  Vec den_pred = model.predict(z_pred, tn, param, cond).denoised;
  Vec d_pred = drift_from_denoised(z_pred, den_pred, tn, param);
  rec.nfe = 2;
  Vec inc = h * (0.5 * (d + d_pred));
  Vec z_next = z + inc;
  rec.denoised_pred = std::move(den_pred);
  rec.drift_pred = std::move(d_pred);
  return {std::move(z_next), std::move(inc), std::move(rec)};
}

/// z_{i+1} = z_i + (t_{i+1} - t_i)(d_i + d'_{i+1|i}) / 2, Euler-only when
/// sigma(t_{i+1}) = 0.
template <ScoreModel M>
std::pair<DiffusionState, StepRecord> heun_step(const M& model, const DiffusionState& state, const TimeGrid& grid,
                                                const Condition& cond = {}) {
  if (state.i >= grid.steps()) throw std::out_of_range("heun_step: step index out of range");
  auto res = heun_kernel(model, state.z, state.i, grid[state.i], grid[state.i + 1], grid.param(), cond);
  return {DiffusionState{std::move(res.z_next), state.i + 1, grid[state.i + 1]}, std::move(res.record)};
}

/// Heun written as two gradient terms (VE only):
/// z + (h / t_i)[z - D(z, t_i)] + (h / (2 t_{i+1}))[D(z, t_i) - D(z_pred, t_{i+1})].
template <ScoreModel M>
Vec reformulated_heun_kernel(const M& model, const Vec& z, double t, double tn, const NoiseParam& param,
                             const Condition& cond) {
  if (param.kind != ParamKind::ve) throw std::invalid_argument("reformulated_heun_step: requires the VE parameterization");
  if (!(t > 0.0) || !(tn > 0.0)) throw std::domain_error("reformulated_heun_step: needs t_i, t_{i+1} > 0");
  const double h = tn - t;
  Vec den = model.predict(z, t, param, cond).denoised;
  Vec z_pred = z + (h / t) * (z - den);
  Vec den_pred = model.predict(z_pred, tn, param, cond).denoised;
  return z + (h / t) * (z - den) + (h / (2.0 * tn)) * (den - den_pred);
}

template <ScoreModel M>
DiffusionState reformulated_heun_step(const M& model, const DiffusionState& state, const TimeGrid& grid,
                                      const Condition& cond = {}) {
  if (state.i >= grid.steps()) throw std::out_of_range("reformulated_heun_step: step index out of range");
  if (grid.terminal_slot(state.i)) throw std::out_of_range("reformulated_heun_step: not defined for the terminal step");
  return {reformulated_heun_kernel(model, state.z, grid[state.i], grid[state.i + 1], grid.param(), cond),
          state.i + 1, grid[state.i + 1]};
}

// ---------------------------------------------------------------------------
// DDIM
// ---------------------------------------------------------------------------

/// z_{i+1} = alpha_{i+1} x_hat + sigma_{i+1} eps, x_hat = (z - sigma_i eps) / alpha_i.
inline Vec ddim_update(const Vec& x_hat, const Vec& eps, double tn, const NoiseParam& param) {
  return param.alpha(tn) * x_hat + param.sigma(tn) * eps;
}

template <ScoreModel M>
StepResult ddim_kernel(const M& model, const Vec& z, std::size_t i, double t, double tn, const NoiseParam& param,
                       const Condition& cond) {
  if (!(param.alpha(t) > 0.0)) throw std::domain_error("ddim_step: alpha(t_i) must be > 0");
  Prediction pred = model.predict(z, t, param, cond);
  StepRecord rec;
  rec.i = i;
  rec.t = t;
  rec.t_next = tn;
  rec.nfe = 1;
  Vec z_next = ddim_update(pred.denoised, pred.noise, tn, param);
  Vec inc = z_next - z;
  rec.z = z;
  rec.x_hat = pred.denoised;
  rec.denoised = pred.denoised;
  rec.eps_tilde = pred.noise;
  rec.noise = std::move(pred.noise);
  return {std::move(z_next), std::move(inc), std::move(rec)};
}

template <ScoreModel M>
std::pair<DiffusionState, StepRecord> ddim_step(const M& model, const DiffusionState& state, const TimeGrid& grid,
                                                const Condition& cond = {}) {
  if (state.i >= grid.steps()) throw std::out_of_range("ddim_step: step index out of range");
  auto res = ddim_kernel(model, state.z, state.i, grid[state.i], grid[state.i + 1], grid.param(), cond);
  return {DiffusionState{std::move(res.z_next), state.i + 1, grid[state.i + 1]}, std::move(res.record)};
}

// ---------------------------------------------------------------------------
// Multistep second-order DPM-Solver (data prediction, log-SNR variable)
// ---------------------------------------------------------------------------

struct EstimatorPoint {
  double t;
  Vec x_hat;
};

/// lambda(t) = log(alpha / sigma)
inline double log_snr(double t, const NoiseParam& param) { return param.log_alpha(t) - std::log(param.sigma(t)); }

/// First step (no history) and the terminal sigma = 0 step are first order:
///   z' = (sigma'/sigma) z - alpha' expm1(-h) x_hat.
/// Otherwise the estimator is extrapolated with r = h_prev / h:
///   D = x_hat + (x_hat - x_prev) / (2 r).
template <ScoreModel M>
StepResult dpm2m_kernel(const M& model, const Vec& z, std::size_t i, double t, double tn, const NoiseParam& param,
                        const Condition& cond, const std::optional<EstimatorPoint>& prev) {
  Prediction pred = model.predict(z, t, param, cond);
  StepRecord rec;
  rec.i = i;
  rec.t = t;
  rec.t_next = tn;
  rec.nfe = 1;
  const double sigma = param.sigma(t);
  const double sigma_n = param.sigma(tn);
  const double alpha_n = param.alpha(tn);
  Vec z_next;
  if (sigma_n == 0.0) {
    z_next = alpha_n * pred.denoised;
  } else {
    const double lam = log_snr(t, param);
    const double h = log_snr(tn, param) - lam;
    Vec d = pred.denoised;
    if (prev) {
      const double h_prev = lam - log_snr(prev->t, param);
      const double inv_2r = h / (2.0 * h_prev);
      d = pred.denoised + inv_2r * (pred.denoised - prev->x_hat);
    }
    z_next = (sigma_n / sigma) * z - (alpha_n * std::expm1(-h)) * d;
  }
  Vec inc = z_next - z;
  rec.z = z;
  rec.x_hat = pred.denoised;
  rec.denoised = pred.denoised;
  rec.noise = std::move(pred.noise);
  return {std::move(z_next), std::move(inc), std::move(rec)};
}

template <ScoreModel M>
std::pair<DiffusionState, StepRecord> dpm2m_step(const M& model, const DiffusionState& state, const TimeGrid& grid,
                                                 const Condition& cond, const std::optional<Vec>& prev_xhat) {
  if (state.i >= grid.steps()) throw std::out_of_range("dpm2m_step: step index out of range");
  if (state.i >= 1 && !prev_xhat) throw std::invalid_argument("dpm2m_step: missing estimator history for i >= 1");
  std::optional<EstimatorPoint> prev;
  if (state.i >= 1) prev = EstimatorPoint{grid[state.i - 1], *prev_xhat};
  auto res = dpm2m_kernel(model, state.z, state.i, grid[state.i], grid[state.i + 1], grid.param(), cond, prev);
  return {DiffusionState{std::move(res.z_next), state.i + 1, grid[state.i + 1]}, std::move(res.record)};
}

// ---------------------------------------------------------------------------
// Pseudo numerical methods: SPNDM and IPNDM
// ---------------------------------------------------------------------------

/// Adams-Bashforth weight rows used by IPNDM, newest noise first.
inline constexpr std::array<std::array<double, 4>, 4> kAdamsBashforthRows{{
    {1.0, 0.0, 0.0, 0.0},
    {3.0 / 2.0, -1.0 / 2.0, 0.0, 0.0},
    {23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0, 0.0},
    {55.0 / 24.0, -59.0 / 24.0, 37.0 / 24.0, -9.0 / 24.0},
}};

/// Adams-Bashforth combination of `eps` (newest first, 1..4 entries) in
/// backward-difference form, so a constant history returns eps[0] exactly.
inline Vec adams_bashforth_combine(std::span<const Vec> eps) {
  if (eps.empty() || eps.size() > 4) throw std::invalid_argument("adams_bashforth_combine: need 1..4 noise values");
  // backward differences: nabla^k eps at the newest index
  static constexpr std::array<double, 4> kDiffWeights{1.0, 1.0 / 2.0, 5.0 / 12.0, 3.0 / 8.0};
  std::vector<Vec> diff(eps.begin(), eps.end());
  Vec out = diff[0];
  for (std::size_t order = 1; order < eps.size(); ++order) {
    for (std::size_t k = 0; k + order < eps.size(); ++k) diff[k] = diff[k] - diff[k + 1];
    out += kDiffWeights[order] * diff[0];
  }
  return out;
}

/// DDIM-form update with a combined noise; records x_hat and eps_tilde.
inline Vec pndm_transfer(const Vec& z, const Vec& eps_tilde, double t, double tn, const NoiseParam& param,
                         Vec* x_hat_out) {
  Vec x_hat = (z - param.sigma(t) * eps_tilde) / param.alpha(t);
  Vec z_next = ddim_update(x_hat, eps_tilde, tn, param);
  if (x_hat_out) *x_hat_out = std::move(x_hat);
  return z_next;
}

/// SPNDM. Without history: pseudo improved Euler (predict with DDIM, average
/// the two noise predictions, redo the transfer). With one prior noise:
/// eps_tilde = (3 eps_i - eps_{i-1}) / 2 then the DDIM-form transfer.
template <ScoreModel M>
StepResult spndm_kernel(const M& model, const Vec& z, std::size_t i, double t, double tn, const NoiseParam& param,
                        const Condition& cond, const Vec* prev_noise) {
  Prediction pred = model.predict(z, t, param, cond);
  StepRecord rec;
  rec.i = i;
  rec.t = t;
  rec.t_next = tn;
  rec.nfe = 1;
  rec.z = z;
  rec.denoised = pred.denoised;
  Vec eps_tilde;
  if (param.sigma(tn) == 0.0) {
    eps_tilde = pred.noise;  // first-order terminal step
  } else if (prev_noise) {
    std::array<Vec, 2> hist{pred.noise, *prev_noise};
    eps_tilde = adams_bashforth_combine(hist);
  } else {
    Vec z_pred = ddim_update(pred.denoised, pred.noise, tn, param);
    Prediction pred_n = model.predict(z_pred, tn, param, cond);
    rec.nfe = 2;
    rec.z_pred = std::move(z_pred);
    eps_tilde = 0.5 * (pred.noise + pred_n.noise);
  }
  Vec x_hat;
  Vec z_next = pndm_transfer(z, eps_tilde, t, tn, param, &x_hat);
  Vec inc = z_next - z;
  rec.noise = std::move(pred.noise);
  rec.eps_tilde = std::move(eps_tilde);
  rec.x_hat = std::move(x_hat);
  return {std::move(z_next), std::move(inc), std::move(rec)};
}

template <ScoreModel M>
std::pair<DiffusionState, StepRecord> spndm_step(const M& model, const DiffusionState& state, const TimeGrid& grid,
                                                 const Condition& cond, std::span<const Vec> history) {
  if (state.i >= grid.steps()) throw std::out_of_range("spndm_step: step index out of range");
  if (state.i >= 1 && history.empty()) throw std::invalid_argument("spndm_step: missing noise history for i >= 1");
  const Vec* prev = state.i >= 1 ? &history.front() : nullptr;
  auto res = spndm_kernel(model, state.z, state.i, grid[state.i], grid[state.i + 1], grid.param(), cond, prev);
  return {DiffusionState{std::move(res.z_next), state.i + 1, grid[state.i + 1]}, std::move(res.record)};
}

/// IPNDM: Adams-Bashforth combination over up to three prior noises, then
/// the DDIM-form transfer. `prev_noises` is newest first.
template <ScoreModel M>
StepResult ipndm_kernel(const M& model, const Vec& z, std::size_t i, double t, double tn, const NoiseParam& param,
                        const Condition& cond, std::span<const Vec> prev_noises) {
  Prediction pred = model.predict(z, t, param, cond);
  StepRecord rec;
  rec.i = i;
  rec.t = t;
  rec.t_next = tn;
  rec.nfe = 1;
  rec.z = z;
  rec.denoised = pred.denoised;
  Vec eps_tilde;
  if (param.sigma(tn) == 0.0) {
    eps_tilde = pred.noise;
  } else {
    std::vector<Vec> hist;
    hist.reserve(4);
    hist.push_back(pred.noise);
    for (std::size_t k = 0; k < prev_noises.size() && k < 3; ++k) hist.push_back(prev_noises[k]);
    eps_tilde = adams_bashforth_combine(hist);
  }
  Vec x_hat;
  Vec z_next = pndm_transfer(z, eps_tilde, t, tn, param, &x_hat);
  Vec inc = z_next - z;
  rec.noise = std::move(pred.noise);
  rec.eps_tilde = std::move(eps_tilde);
  rec.x_hat = std::move(x_hat);
  return {std::move(z_next), std::move(inc), std::move(rec)};
}

template <ScoreModel M>
std::pair<DiffusionState, StepRecord> ipndm_step(const M& model, const DiffusionState& state, const TimeGrid& grid,
                                                 const Condition& cond, std::span<const Vec> history) {
  if (state.i >= grid.steps()) throw std::out_of_range("ipndm_step: step index out of range");
  const std::size_t depth = std::min<std::size_t>(state.i, 3);
  if (history.size() < depth) throw std::invalid_argument("ipndm_step: not enough noise history");
  auto res = ipndm_kernel(model, state.z, state.i, grid[state.i], grid[state.i + 1], grid.param(), cond,
                          history.first(depth));
  return {DiffusionState{std::move(res.z_next), state.i + 1, grid[state.i + 1]}, std::move(res.record)};
}

// ---------------------------------------------------------------------------
// Dispatch over solvers with history taken from the trajectory's records
// ---------------------------------------------------------------------------

/// One baseline step from (z, t) to tn; multistep solvers read `prev` (the
/// records of earlier steps, newest last).
template <ScoreModel M>
StepResult baseline_step(Solver solver, const M& model, const Vec& z, std::size_t i, double t, double tn,
                         const NoiseParam& param, const Condition& cond, const History& prev) {
  switch (solver) {
    case Solver::heun:
      return heun_kernel(model, z, i, t, tn, param, cond);
    case Solver::ddim:
      return ddim_kernel(model, z, i, t, tn, param, cond);
    case Solver::dpm2m: {
      std::optional<EstimatorPoint> p;
      if (!prev.empty()) p = EstimatorPoint{prev.back().t, StepRecord::need(prev.back().x_hat, "x_hat")};
      return dpm2m_kernel(model, z, i, t, tn, param, cond, p);
    }
    case Solver::spndm: {
      const Vec* p = prev.empty() ? nullptr : &StepRecord::need(prev.back().noise, "noise");
      return spndm_kernel(model, z, i, t, tn, param, cond, p);
    }
    case Solver::ipndm: {
      std::vector<Vec> hist;
      for (std::size_t k = 0; k < prev.size() && k < 3; ++k) hist.push_back(StepRecord::need(prev.back(k).noise, "noise"));
      return ipndm_kernel(model, z, i, t, tn, param, cond, hist);
    }
  }
  throw std::logic_error("baseline_step: unknown solver");
}

/// Function evaluations one trajectory over `grid` consumes.
inline std::size_t grid_nfe(Solver solver, const TimeGrid& grid) {
  std::size_t total = 0;
  for (std::size_t i = 0; i < grid.steps(); ++i) {
    const bool terminal = grid.terminal_slot(i);
    if (solver == Solver::heun) total += terminal ? 1 : 2;
    else if (solver == Solver::spndm && i == 0 && !terminal) total += 2;
    else total += 1;
  }
  return total;
}

/// Step count N whose trajectory costs exactly `nfe` evaluations.
inline std::size_t steps_for_nfe(Solver solver, std::size_t nfe, bool terminal_zero) {
  std::size_t n = 0;
  switch (solver) {
    case Solver::heun:
      if (terminal_zero ? nfe % 2 == 0 : nfe % 2 == 1)
        throw std::invalid_argument("NFE " + std::to_string(nfe) + " is not reachable by Heun on this grid layout");
      n = terminal_zero ? (nfe + 1) / 2 : nfe / 2;
      break;
    case Solver::spndm:
      n = nfe >= 1 ? nfe - 1 : 0;
      break;
    default:
      n = nfe;
  }
  if (n < 2) throw std::invalid_argument("NFE " + std::to_string(nfe) + " gives fewer than two steps");
  return n;
}

}  // namespace iia
