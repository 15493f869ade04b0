// SPDX-License-Identifier: Apache-2.0
//
// Noise-level parameterizations and reverse-time grids.
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "iia/common.hpp"

namespace iia {

enum class ParamKind { ve, vp };

struct NoiseLevel {
  double alpha;
  double sigma;
};

/// Forward-process scales (alpha(t), sigma(t)).
///
/// VE: alpha = 1, sigma = t.
/// VP: log alpha(t) = -(beta_max - beta_min) t^2 / 4 - beta_min t / 2 (the
/// continuous linear-beta schedule), sigma = sqrt(1 - alpha^2).
struct NoiseParam {
  ParamKind kind = ParamKind::ve;
  double beta_min = 0.1;
  double beta_max = 20.0;

  static NoiseParam ve() { return {}; }
  static NoiseParam vp(double beta_min = 0.1, double beta_max = 20.0) {
    return {ParamKind::vp, beta_min, beta_max};
  }

  double log_alpha(double t) const {
    if (kind == ParamKind::ve) return 0.0;
    return -0.25 * (beta_max - beta_min) * t * t - 0.5 * beta_min * t;
  }
  /// d/dt log alpha
  double log_alpha_dot(double t) const {
    if (kind == ParamKind::ve) return 0.0;
    return -0.5 * (beta_max - beta_min) * t - 0.5 * beta_min;
  }

  double alpha(double t) const { return std::exp(log_alpha(t)); }

  double sigma(double t) const {
    if (kind == ParamKind::ve) return t;
    // -expm1(2 log a) = 1 - a^2 without cancellation near t = 0
    return std::sqrt(-std::expm1(2.0 * log_alpha(t)));
  }

  /// sigma / alpha
  double sigma_tilde(double t) const {
    if (kind == ParamKind::ve) return t;
    return std::sqrt(std::expm1(-2.0 * log_alpha(t)));
  }

  double sigma_tilde_dot(double t) const {
    if (kind == ParamKind::ve) return 1.0;
    const double st = sigma_tilde(t);
    // d/dt sqrt(exp(-2 la) - 1) = -la' exp(-2 la) / st
    return -log_alpha_dot(t) * std::exp(-2.0 * log_alpha(t)) / st;
  }

  bool operator==(const NoiseParam&) const = default;
};

inline NoiseLevel noise_level(const NoiseParam& param, double t) {
  if (!std::isfinite(t) || t < 0.0) throw std::domain_error("noise_level: time must be finite and >= 0");
  return {param.alpha(t), param.sigma(t)};
}

inline std::string_view to_string(ParamKind k) { return k == ParamKind::ve ? "ve" : "vp"; }

inline ParamKind parse_param_kind(std::string_view s) {
  if (s == "ve") return ParamKind::ve;
  if (s == "vp") return ParamKind::vp;
  throw std::invalid_argument("unknown noise parameterization '" + std::string(s) + "'");
}

/// Descending reverse-time schedule t_0 > t_1 > ... > t_N >= 0.
class TimeGrid {
 public:
  TimeGrid(std::vector<double> times, NoiseParam param) : times_(std::move(times)), param_(param) {
    require(times_.size() >= 2, "TimeGrid: need at least two times");
    for (std::size_t k = 0; k < times_.size(); ++k) {
      require(std::isfinite(times_[k]) && times_[k] >= 0.0, "TimeGrid: times must be finite and >= 0");
      if (k > 0) require(times_[k] < times_[k - 1], "TimeGrid: times must be strictly decreasing");
    }
  }

  const std::vector<double>& times() const { return times_; }
  double operator[](std::size_t i) const { return times_.at(i); }
  std::size_t steps() const { return times_.size() - 1; }
  const NoiseParam& param() const { return param_; }

  /// True when the slot ending at t_{i+1} reaches sigma = 0.
  bool terminal_slot(std::size_t i) const { return param_.sigma(times_.at(i + 1)) == 0.0; }

 private:
  std::vector<double> times_;
  NoiseParam param_;
};

enum class GridKind { edm_rho, uniform, quadratic };

inline std::string_view to_string(GridKind k) {
  switch (k) {
    case GridKind::edm_rho: return "edm_rho";
    case GridKind::uniform: return "uniform";
    case GridKind::quadratic: return "quadratic";
  }
  return "?";
}

inline GridKind parse_grid_kind(std::string_view s) {
  if (s == "edm_rho") return GridKind::edm_rho;
  if (s == "uniform") return GridKind::uniform;
  if (s == "quadratic") return GridKind::quadratic;
  throw std::invalid_argument("unknown grid kind '" + std::string(s) + "'");
}

struct GridSpec {
  GridKind kind = GridKind::edm_rho;
  std::size_t steps = 8;
  double t_min = 0.002;
  double t_max = 80.0;
  double rho = 7.0;
  /// Replace the final slot by a descent to exactly t = 0. The step count
  /// stays `steps`: N nonzero times plus the appended 0.
  bool terminal_zero = false;
};

/// Builds an N-step grid (N + 1 times) from t_max down to t_min.
///
/// edm_rho: t_i = (t_max^(1/rho) + u_i (t_min^(1/rho) - t_max^(1/rho)))^rho
/// uniform: linear in u_i
/// quadratic: t_min + (t_max - t_min) (1 - u_i)^2
///
/// With terminal_zero the nonzero times use u_i = i/(N-1) for i < N and
/// t_N = 0, which is the standard EDM sampler layout.
inline TimeGrid build_grid(const GridSpec& spec, const NoiseParam& param) {
  const std::size_t n = spec.steps;
  if (n < 2) throw std::invalid_argument("build_grid: need N >= 2");
  if (!(std::isfinite(spec.t_max) && spec.t_max > 0.0)) throw std::invalid_argument("build_grid: t_max must be positive");
  if (!(std::isfinite(spec.t_min) && spec.t_min >= 0.0)) throw std::invalid_argument("build_grid: t_min must be >= 0");
  if (spec.t_min >= spec.t_max) throw std::invalid_argument("build_grid: need t_min < t_max");
  if (!(spec.rho > 0.0)) throw std::invalid_argument("build_grid: rho must be positive");
  if (spec.terminal_zero && spec.t_min == 0.0)
    throw std::invalid_argument("build_grid: terminal_zero needs t_min > 0");

  const std::size_t nonzero = spec.terminal_zero ? n : n + 1;
  const double denom = static_cast<double>(nonzero - 1);
  std::vector<double> times(nonzero);
  for (std::size_t i = 0; i < nonzero; ++i) {
    const double u = static_cast<double>(i) / denom;
    switch (spec.kind) {
      case GridKind::edm_rho: {
        const double a = std::pow(spec.t_max, 1.0 / spec.rho);
        const double b = std::pow(spec.t_min, 1.0 / spec.rho);
        times[i] = std::pow(a + u * (b - a), spec.rho);
        break;
      }
      case GridKind::uniform:
        times[i] = spec.t_max + u * (spec.t_min - spec.t_max);
        break;
      case GridKind::quadratic:
        times[i] = spec.t_min + (spec.t_max - spec.t_min) * (1.0 - u) * (1.0 - u);
        break;
    }
  }
  // pin the endpoints against pow round-off
  times.front() = spec.t_max;
  times.back() = spec.t_min;
  if (spec.terminal_zero) times.push_back(0.0);
  return TimeGrid(std::move(times), param);
}

/// Uniform refinement t_{i+m/M} = t_i + (t_{i+1} - t_i) m / M, m = 0..M.
inline std::vector<double> refine_slot(double t_from, double t_to, std::size_t M) {
  if (M == 0) throw std::invalid_argument("refine_slot: M must be >= 1");
  std::vector<double> out(M + 1);
  const double width = t_to - t_from;
  for (std::size_t m = 0; m <= M; ++m) out[m] = t_from + width * static_cast<double>(m) / static_cast<double>(M);
  out.front() = t_from;
  out.back() = t_to;
  return out;
}

inline std::vector<double> refine_slot(const TimeGrid& grid, std::size_t i, std::size_t M) {
  if (i >= grid.steps()) throw std::out_of_range("refine_slot: step index out of range");
  return refine_slot(grid[i], grid[i + 1], M);
}

/// Global refinement: every slot split into M uniform sub-slots.
inline TimeGrid refine_grid(const TimeGrid& grid, std::size_t M) {
  std::vector<double> fine;
  fine.reserve(grid.steps() * M + 1);
  for (std::size_t i = 0; i < grid.steps(); ++i) {
    auto slot = refine_slot(grid, i, M);
    fine.insert(fine.end(), slot.begin(), slot.end() - 1);
  }
  fine.push_back(grid.times().back());
  return TimeGrid(std::move(fine), grid.param());
}

/// FNV-1a over the parameterization and the bit patterns of the times.
inline std::string grid_hash(const TimeGrid& grid) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::uint64_t word) {
    for (int b = 0; b < 8; ++b) {
      h ^= (word >> (8 * b)) & 0xffU;
      h *= 0x100000001b3ULL;
    }
  };
  auto mix_double = [&mix](double x) {
    std::uint64_t bits;
    std::memcpy(&bits, &x, sizeof bits);
    mix(bits);
  };
  const auto& p = grid.param();
  mix(p.kind == ParamKind::ve ? 1 : 2);
  if (p.kind == ParamKind::vp) {
    mix_double(p.beta_min);
    mix_double(p.beta_max);
  }
  mix(grid.times().size());
  for (double t : grid.times()) mix_double(t);
  static constexpr char hex[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int k = 15; k >= 0; --k, h >>= 4) out[static_cast<std::size_t>(k)] = hex[h & 0xf];
  return out;
}

}  // namespace iia
