// SPDX-License-Identifier: Apache-2.0
//
// Residual curves, terminal-error sweeps against converged references,
// sliced Wasserstein distance and the metrics CSV format.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "iia/iia.hpp"
#include "iia/io.hpp"
#include "iia/parallel.hpp"
#include "iia/rng.hpp"

namespace iia {

struct MetricsRow {
  std::string variant;
  std::size_t nfe = 0;
  std::optional<std::size_t> step;  // empty means "terminal"
  std::string metric;
  double value = 0.0;
  std::size_t n = 0;
};

inline constexpr const char* kMetricsHeader = "variant,nfe,step,metric,value,n";

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& r : rows) {
    if (!std::isfinite(r.value)) throw std::invalid_argument("metrics: non-finite value for metric '" + r.metric + "'");
    if (r.variant.empty() || r.metric.empty() ||
        r.variant.find_first_of(",\n\"") != std::string::npos || r.metric.find_first_of(",\n\"") != std::string::npos)
      throw std::invalid_argument("metrics: variant and metric names must be non-empty and free of ',', '\"', newlines");
    out += r.variant;
    out += ',';
    out += std::to_string(r.nfe);
    out += ',';
    out += r.step ? std::to_string(*r.step) : std::string("terminal");
    out += ',';
    out += r.metric;
    out += ',';
    out += format_double(r.value);
    out += ',';
    out += std::to_string(r.n);
    out += '\n';
  }
  return out;
}

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
  write_file_atomic(path, metrics_csv(rows));
}

/// Parses and validates a metrics CSV; throws on the first malformed row.
inline std::vector<MetricsRow> parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw std::invalid_argument("metrics csv: bad header");
  std::vector<MetricsRow> rows;
  std::size_t lineno = 1;
  auto parse_size = [&](const std::string& s) {
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size())
      throw std::invalid_argument("metrics csv line " + std::to_string(lineno) + ": bad integer '" + s + "'");
    return v;
  };
  while (std::getline(in, line)) {
    ++lineno;
    std::vector<std::string> cells;
    std::size_t start = 0;
    for (;;) {
      auto comma = line.find(',', start);
      cells.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (cells.size() != 6)
      throw std::invalid_argument("metrics csv line " + std::to_string(lineno) + ": expected 6 fields");
    MetricsRow r;
    r.variant = cells[0];
    r.nfe = parse_size(cells[1]);
    if (cells[2] != "terminal") r.step = parse_size(cells[2]);
    r.metric = cells[3];
    auto [p, ec] = std::from_chars(cells[4].data(), cells[4].data() + cells[4].size(), r.value);
    if (ec != std::errc{} || p != cells[4].data() + cells[4].size() || !std::isfinite(r.value))
      throw std::invalid_argument("metrics csv line " + std::to_string(lineno) + ": bad value '" + cells[4] + "'");
    r.n = parse_size(cells[5]);
    if (r.variant.empty() || r.metric.empty())
      throw std::invalid_argument("metrics csv line " + std::to_string(lineno) + ": empty name");
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Sliced Wasserstein distance
// ---------------------------------------------------------------------------

namespace detail {

/// Squared W2 between two 1-D empirical measures with uniform weights,
/// integrating the difference of quantile functions over merged breakpoints.
inline double w2_squared_1d(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const std::size_t na = a.size(), nb = b.size();
  if (na == nb) {
    double s = 0.0;
    for (std::size_t k = 0; k < na; ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
    return s / static_cast<double>(na);
  }
  // breakpoints at k/na and l/nb, compared as k*nb vs l*na to stay exact
  std::size_t k = 0, l = 0;
  double s = 0.0;
  unsigned long long pos = 0;
  const unsigned long long total = static_cast<unsigned long long>(na) * nb;
  while (pos < total) {
    const unsigned long long next_a = static_cast<unsigned long long>(k + 1) * nb;
    const unsigned long long next_b = static_cast<unsigned long long>(l + 1) * na;
    const unsigned long long next = std::min(next_a, next_b);
    const double diff = a[k] - b[l];
    s += diff * diff * static_cast<double>(next - pos);
    pos = next;
    if (next == next_a) ++k;
    if (next == next_b) ++l;
  }
  return s / static_cast<double>(total);
}

}  // namespace detail

/// Mean over `projections` seeded random unit directions of the 1-D W2
/// distance between the projected clouds.
inline double sliced_wasserstein(const std::vector<Vec>& a, const std::vector<Vec>& b, std::size_t projections,
                                 std::uint64_t seed) {
  if (a.empty() || b.empty()) throw std::invalid_argument("sliced_wasserstein: empty cloud");
  if (projections == 0) throw std::invalid_argument("sliced_wasserstein: need at least one projection");
  const Eigen::Index d = a.front().size();
  for (const auto& x : a)
    if (x.size() != d) throw std::invalid_argument("sliced_wasserstein: dimension mismatch");
  for (const auto& x : b)
    if (x.size() != d) throw std::invalid_argument("sliced_wasserstein: dimension mismatch");
  double total = 0.0;
  std::vector<double> pa(a.size()), pb(b.size());
  for (std::size_t p = 0; p < projections; ++p) {
    Vec dir;
    if (d == 1) {
      dir = Vec::Ones(1);
    } else {
      auto eng = keyed_engine(seed, Stream::evaluation, Lane::projection, p);
      do {
        dir = standard_normal(eng, d);
      } while (dir.norm() == 0.0);
      dir.normalize();
    }
    for (std::size_t k = 0; k < a.size(); ++k) pa[k] = dir.dot(a[k]);
    for (std::size_t k = 0; k < b.size(); ++k) pb[k] = dir.dot(b[k]);
    total += std::sqrt(detail::w2_squared_1d(pa, pb));
  }
  return total / static_cast<double>(projections);
}

// ---------------------------------------------------------------------------
// Converged references
// ---------------------------------------------------------------------------

class ConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kReferenceGate = 1e-8;

/// Exact probability-flow solution when the data distribution is a single
/// Gaussian: the standardized coordinate (z - alpha mu) / sqrt(alpha^2 s^2 + sigma^2)
/// is conserved along the flow.
inline std::optional<Vec> closed_form_terminal(const GaussianMixture& gm, const TimeGrid& grid, const Vec& z0,
                                               const Condition& cond = {}) {
  const auto& lw = gm.log_weights(cond);
  std::optional<std::size_t> only;
  for (std::size_t k = 0; k < lw.size(); ++k) {
    if (!std::isfinite(lw[k])) continue;
    if (only) return std::nullopt;
    only = k;
  }
  if (!only) return std::nullopt;
  const auto& c = gm.components()[*only];
  const auto& p = grid.param();
  const double t0 = grid.times().front(), tn = grid.times().back();
  const double a0 = p.alpha(t0), an = p.alpha(tn);
  const double s2 = c.scale * c.scale;
  const double v0 = a0 * a0 * s2 + p.sigma(t0) * p.sigma(t0);
  const double vn = an * an * s2 + p.sigma(tn) * p.sigma(tn);
  if (!(v0 > 0.0)) return std::nullopt;
  return Vec(an * c.mean + std::sqrt(vn / v0) * (z0 - a0 * c.mean));
}

template <ScoreModel M>
std::optional<Vec> closed_form_terminal(const M&, const TimeGrid&, const Vec&, const Condition& = {}) {
  return std::nullopt;
}

namespace detail {
template <class M>
concept HasDenoiser = requires(const M& m, const Vec& z, double t, const NoiseParam& p, const Condition& c) {
  { m.denoised(z, t, p, c) } -> std::convertible_to<Vec>;
};

template <ScoreModel M>
Vec denoise(const M& model, const Vec& z, double t, const NoiseParam& p, const Condition& c) {
  if constexpr (HasDenoiser<M>) return model.denoised(z, t, p, c);
  else return model.predict(z, t, p, c).denoised;
}
}  // namespace detail

/// Heun over the whole grid without per-step records.
template <ScoreModel M>
Vec heun_terminal(const M& model, const TimeGrid& grid, const Vec& z0, const Condition& cond) {
  const NoiseParam& p = grid.param();
  Vec z = z0, z_pred(z0.size()), d(z0.size()), d_pred(z0.size());
  for (std::size_t i = 0; i < grid.steps(); ++i) {
    const double t = grid[i], tn = grid[i + 1], h = tn - t;
    d = drift_from_denoised(z, detail::denoise(model, z, t, p, cond), t, p);
    z_pred = z + h * d;
    if (p.sigma(tn) == 0.0) {
      z.swap(z_pred);
      continue;
    }
    d_pred = drift_from_denoised(z_pred, detail::denoise(model, z_pred, tn, p, cond), tn, p);
    z += (0.5 * h) * (d + d_pred);
  }
  return z;
}

struct ReferenceResult {
  Vec z;
  std::size_t refinement = 0;  // M of the returned solution; 0 for the closed form
  double rel_change = 0.0;     // relative change over the last doubling
};

/// Terminal state of the probability-flow ODE from z0 over the grid's time
/// span. Uses the closed form when one exists. Otherwise runs Heun on the
/// grid refined by M_ref, 2 M_ref, 4 M_ref, ... until two consecutive
/// refinements agree to 1e-8 relative, and returns the finer one. Gives up
/// with ConvergenceError after `max_doublings` doublings.
template <ScoreModel M>
ReferenceResult reference_terminal_info(const M& model, const TimeGrid& grid, const Vec& z0, std::size_t M_ref = 64,
                                        const Condition& cond = {}, std::size_t max_doublings = 6) {
  if (M_ref < 32) throw std::invalid_argument("reference_terminal: M_ref must be >= 32");
  if (auto exact = closed_form_terminal(model, grid, z0, cond)) return {*exact, 0, 0.0};
  std::size_t m = M_ref;
  Vec coarse = heun_terminal(model, refine_grid(grid, m), z0, cond);
  double rel = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < max_doublings; ++k) {
    Vec fine = heun_terminal(model, refine_grid(grid, 2 * m), z0, cond);
    rel = (coarse - fine).norm() / std::max(fine.norm(), 1.0);
    m *= 2;
    if (rel < kReferenceGate) return {std::move(fine), m, rel};
    coarse = std::move(fine);
  }
  throw ConvergenceError("reference_terminal: refinement " + std::to_string(m / 2) + " vs " + std::to_string(m) +
                         " still differs by " + format_double(rel) + " (gate 1e-08)");
}

template <ScoreModel M>
Vec reference_terminal(const M& model, const TimeGrid& grid, const Vec& z0, std::size_t M_ref = 64,
                       const Condition& cond = {}) {
  return reference_terminal_info(model, grid, z0, M_ref, cond).z;
}

// ---------------------------------------------------------------------------
// Residual curves
// ---------------------------------------------------------------------------

/// Per step, the batch mean of ||coarse increment - fine oracle||^2 for the
/// baseline solver and, with a table, for the IIA increment, both evaluated
/// at the same states. States follow the IIA sampler when a table with the
/// "iia" calibration trajectory is given, else the baseline sampler.
template <ScoreModel M>
std::vector<MetricsRow> residual_curve(Variant v, const M& model, const TimeGrid& grid, const CoefficientTable* table,
                                       const CalibrationBatch& batch, std::size_t M_refine, std::size_t r,
                                       unsigned workers = 1) {
  if (table) {
    if (table->variant != v) throw std::invalid_argument("residual_curve: table variant mismatch");
    if (table->grid_hash != grid_hash(grid)) throw std::invalid_argument("residual_curve: coefficient table grid hash mismatch");
    r = table->r;
  }
  const std::size_t B = batch.size();
  if (B == 0) throw std::invalid_argument("residual_curve: empty batch");
  const std::size_t N = grid.steps();
  const bool follow_iia = table && table->trajectory == "iia";
  const std::size_t nfe_total = grid_nfe(base_solver(v), grid);

  std::vector<Vec> z = batch.z0;
  std::vector<History> hist(B, History(history_depth(r)));
  std::vector<double> base_sq(B), iia_sq(B);
  std::vector<MetricsRow> rows;
  const std::string base_name(to_string(base_solver(v)));
  const std::string iia_name(to_string(v));
  for (std::size_t i = 0; i < N; ++i) {
    const double t = grid[i], tn = grid[i + 1];
    const std::optional<Vec> coeffs = table ? table->coefficients_at(i) : std::nullopt;
    parallel_for(B, workers, [&](std::size_t b) {
      auto res = iia_step(v, r, model, z[b], i, t, tn, grid.param(), batch.conditions[b], hist[b], coeffs);
      Vec target = fine_oracle(base_solver(v), model, z[b], i, t, tn, grid.param(), batch.conditions[b], hist[b], M_refine);
      base_sq[b] = (res.base.increment - target).squaredNorm();
      iia_sq[b] = (res.z_next - z[b] - target).squaredNorm();
      z[b] = follow_iia ? std::move(res.z_next) : std::move(res.base.z_next);
      hist[b].push(std::move(res.base.record));
    });
    double bs = 0.0, is = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      bs += base_sq[b];
      is += iia_sq[b];
    }
    rows.push_back({base_name, nfe_total, i, "residual_mse", bs / static_cast<double>(B), B});
    if (table) rows.push_back({iia_name, nfe_total, i, "residual_mse", is / static_cast<double>(B), B});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Terminal-error sweeps
// ---------------------------------------------------------------------------

/// Mean and standard error; the standard error is absent for n = 1.
struct SampleSummary {
  double mean = 0.0;
  std::optional<double> stderr_;
  std::size_t n = 0;
};

inline SampleSummary summarize(const std::vector<double>& xs) {
  if (xs.empty()) throw std::invalid_argument("summarize: no samples");
  SampleSummary s;
  s.n = xs.size();
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(s.n);
  if (s.n > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.stderr_ = std::sqrt(ss / static_cast<double>(s.n - 1) / static_cast<double>(s.n));
  }
  return s;
}

/// One sampler configuration to evaluate: a baseline solver, or an IIA table.
struct SweepEntry {
  std::string name;
  Solver solver = Solver::heun;
  TimeGrid grid;
  const CoefficientTable* table = nullptr;
  std::size_t nfe = 0;
};

struct SweepOptions {
  std::size_t swd_projections = 64;
  std::uint64_t eval_seed = 1;
  unsigned workers = 1;
};

/// Terminal error against per-sample references, plus the sliced Wasserstein
/// distance between the terminal cloud and an exact data cloud, for each
/// entry. `z0`, `conditions` and `references` are indexed by sample.
template <ScoreModel M>
std::vector<MetricsRow> terminal_error_sweep(const M& model, const std::vector<SweepEntry>& entries,
                                             const std::vector<Vec>& z0, const std::vector<Condition>& conditions,
                                             const std::vector<Vec>& references, const std::vector<Vec>& data_cloud,
                                             const SweepOptions& opt) {
  const std::size_t n = z0.size();
  if (n == 0) throw std::invalid_argument("terminal_error_sweep: no evaluation samples");
  if (references.size() != n || conditions.size() != n)
    throw std::invalid_argument("terminal_error_sweep: one reference and condition per sample");
  std::vector<MetricsRow> rows;
  for (const auto& e : entries) {
    std::vector<Vec> terminal(n);
    std::vector<double> err(n);
    std::vector<std::size_t> nfe(n);
    parallel_for(n, opt.workers, [&](std::size_t b) {
      auto res = run_sampler(e.solver, model, e.grid, z0[b], conditions[b], e.table);
      err[b] = (res.terminal.z - references[b]).norm();
      nfe[b] = res.nfe;
      terminal[b] = std::move(res.terminal.z);
    });
    const std::size_t used = nfe.front();
    auto s = summarize(err);
    rows.push_back({e.name, e.nfe, std::nullopt, "terminal_error", s.mean, n});
    if (s.stderr_) rows.push_back({e.name, e.nfe, std::nullopt, "terminal_error_stderr", *s.stderr_, n});
    rows.push_back({e.name, e.nfe, std::nullopt, "nfe_used", static_cast<double>(used), n});
    if (n >= 2 && data_cloud.size() >= 2)
      rows.push_back({e.name, e.nfe, std::nullopt, "sliced_w2",
                      sliced_wasserstein(terminal, data_cloud, opt.swd_projections, opt.eval_seed), n});
  }
  return rows;
}

}  // namespace iia
