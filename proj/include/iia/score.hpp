// SPDX-License-Identifier: Apache-2.0
//
// Closed-form score, denoiser and noise predictions for isotropic Gaussian
// mixtures, prediction-form conversion and the classifier-free guidance
// combiner.
#pragma once

#include <array>
#include <cmath>
#include <concepts>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "iia/common.hpp"
#include "iia/schedule.hpp"

namespace iia {

/// A null label is the unconditional model.
struct Condition {
  std::optional<std::string> label;

  static Condition null() { return {}; }
  static Condition of(std::string l) { return {std::move(l)}; }
  bool is_null() const { return !label.has_value(); }
};

/// Noise and data predictions at one (z, t).
struct Prediction {
  Vec noise;
  Vec denoised;
};

/// Anything the samplers can evaluate.
template <class M>
concept ScoreModel = requires(const M& m, const Vec& z, double t, const NoiseParam& p, const Condition& c) {
  { m.predict(z, t, p, c) } -> std::convertible_to<Prediction>;
  { m.dim() } -> std::convertible_to<Eigen::Index>;
};

enum class PredictionForm { noise, denoised };

/// Fills the missing field of a prediction from x = (z - sigma eps) / alpha.
inline Prediction convert_predictions(const Vec& z, double t, const NoiseParam& param, PredictionForm given,
                                      const Vec& value) {
  const double alpha = param.alpha(t);
  const double sigma = param.sigma(t);
  if (given == PredictionForm::noise) return {value, (z - sigma * value) / alpha};
  if (sigma == 0.0) throw std::domain_error("convert_predictions: sigma(t) = 0, noise is undefined");
  return {(z - alpha * value) / sigma, value};
}

struct MixtureComponent {
  double weight;
  Vec mean;
  double scale;
};

/// Isotropic Gaussian mixture p(x) = sum_k w_k N(x | mu_k, s_k^2 I).
///
/// Named conditions reweight the components (multiplier per component,
/// renormalized); the null condition is the full mixture.
class GaussianMixture {
 public:
  explicit GaussianMixture(std::vector<MixtureComponent> components) : comps_(std::move(components)) {
    if (comps_.empty()) throw std::invalid_argument("GaussianMixture: need at least one component");
    const Eigen::Index d = comps_.front().mean.size();
    if (d < 1) throw std::invalid_argument("GaussianMixture: dimension must be >= 1");
    double total = 0.0;
    for (const auto& c : comps_) {
      if (c.mean.size() != d) throw std::invalid_argument("GaussianMixture: inconsistent component dimensions");
      if (!(c.weight > 0.0) || !std::isfinite(c.weight)) throw std::invalid_argument("GaussianMixture: weights must be positive");
      if (!(c.scale >= 0.0) || !std::isfinite(c.scale)) throw std::invalid_argument("GaussianMixture: scales must be >= 0");
      if (!c.mean.allFinite()) throw std::invalid_argument("GaussianMixture: means must be finite");
      total += c.weight;
    }
    for (auto& c : comps_) c.weight /= total;
    base_log_w_.reserve(comps_.size());
    for (const auto& c : comps_) base_log_w_.push_back(std::log(c.weight));
  }

  /// Registers a condition as per-component multipliers (>= 0, not all 0).
  void add_condition(const std::string& label, const std::vector<double>& multipliers) {
    if (multipliers.size() != comps_.size()) throw std::invalid_argument("condition '" + label + "': wrong multiplier count");
    double total = 0.0;
    for (std::size_t k = 0; k < comps_.size(); ++k) {
      if (!(multipliers[k] >= 0.0) || !std::isfinite(multipliers[k]))
        throw std::invalid_argument("condition '" + label + "': multipliers must be >= 0");
      total += multipliers[k] * comps_[k].weight;
    }
    if (!(total > 0.0)) throw std::invalid_argument("condition '" + label + "': all components zeroed");
    std::vector<double> lw(comps_.size());
    for (std::size_t k = 0; k < comps_.size(); ++k) {
      const double w = multipliers[k] * comps_[k].weight / total;
      lw[k] = w > 0.0 ? std::log(w) : -std::numeric_limits<double>::infinity();
    }
    cond_log_w_[label] = std::move(lw);
    cond_mult_[label] = multipliers;
  }

  /// "class k" conditions that keep only component k.
  void add_class_conditions() {
    for (std::size_t k = 0; k < comps_.size(); ++k) {
      std::vector<double> m(comps_.size(), 0.0);
      m[k] = 1.0;
      add_condition("class" + std::to_string(k), m);
    }
  }

  Eigen::Index dim() const { return comps_.front().mean.size(); }
  std::size_t size() const { return comps_.size(); }
  const std::vector<MixtureComponent>& components() const { return comps_; }
  const std::map<std::string, std::vector<double>>& conditions() const { return cond_mult_; }
  bool has_condition(const std::string& l) const { return cond_log_w_.count(l) != 0; }

  std::vector<std::string> condition_labels() const {
    std::vector<std::string> out;
    for (const auto& [k, _] : cond_mult_) out.push_back(k);
    return out;
  }

  const std::vector<double>& log_weights(const Condition& cond) const {
    if (cond.is_null()) return base_log_w_;
    auto it = cond_log_w_.find(*cond.label);
    if (it == cond_log_w_.end()) throw std::invalid_argument("unknown condition label '" + *cond.label + "'");
    return it->second;
  }

  /// Noise and data predictions; at sigma = 0 the noise field is zero.
  Prediction predict(const Vec& z, double t, const NoiseParam& param, const Condition& cond) const;

  /// Data prediction only.
  Vec denoised(const Vec& z, double t, const NoiseParam& param, const Condition& cond) const;

 private:
  std::vector<MixtureComponent> comps_;
  std::vector<double> base_log_w_;
  std::map<std::string, std::vector<double>> cond_log_w_;
  std::map<std::string, std::vector<double>> cond_mult_;
};

namespace detail {

struct ComponentTerms {
  std::vector<double> log_joint;  // log w_k + log N(z | alpha mu_k, v_k I)
  std::vector<double> var;        // v_k = alpha^2 s_k^2 + sigma^2
  double max_log = -std::numeric_limits<double>::infinity();
};

inline ComponentTerms component_terms(const GaussianMixture& gm, const Vec& z, double alpha, double sigma,
                                      const Condition& cond) {
  if (z.size() != gm.dim()) throw std::invalid_argument("mixture evaluation: dimension mismatch");
  const auto& lw = gm.log_weights(cond);
  const auto& comps = gm.components();
  const double d = static_cast<double>(gm.dim());
  ComponentTerms out;
  out.log_joint.resize(comps.size());
  out.var.resize(comps.size());
  bool any = false;
  for (std::size_t k = 0; k < comps.size(); ++k) {
    const double v = alpha * alpha * comps[k].scale * comps[k].scale + sigma * sigma;
    out.var[k] = v;
    if (v <= 0.0 || !std::isfinite(lw[k])) {
      out.log_joint[k] = -std::numeric_limits<double>::infinity();
      continue;
    }
    any = true;
    const double sq = (z - alpha * comps[k].mean).squaredNorm();
    out.log_joint[k] = lw[k] - 0.5 * d * std::log(2.0 * std::numbers::pi * v) - 0.5 * sq / v;
    out.max_log = std::max(out.max_log, out.log_joint[k]);
  }
  if (!any) throw std::domain_error("mixture evaluation: alpha^2 s_k^2 + sigma^2 = 0 for every component");
  return out;
}

/// Normalized posterior responsibilities, max-shifted.
inline std::vector<double> responsibilities_from(const ComponentTerms& terms, double* log_norm = nullptr) {
  std::vector<double> r(terms.log_joint.size());
  double total = 0.0;
  for (std::size_t k = 0; k < r.size(); ++k) {
    r[k] = std::isfinite(terms.log_joint[k]) ? std::exp(terms.log_joint[k] - terms.max_log) : 0.0;
    total += r[k];
  }
  for (double& x : r) x /= total;
  if (log_norm) *log_norm = terms.max_log + std::log(total);
  return r;
}

}  // namespace detail

/// log q(z; alpha, sigma) for the mixture pushed through the forward process.
inline double gm_log_density(const GaussianMixture& gm, const Vec& z, double alpha, double sigma,
                             const Condition& cond = {}) {
  auto terms = detail::component_terms(gm, z, alpha, sigma, cond);
  double log_norm = 0.0;
  detail::responsibilities_from(terms, &log_norm);
  return log_norm;
}

inline std::vector<double> gm_responsibilities(const GaussianMixture& gm, const Vec& z, double alpha, double sigma,
                                               const Condition& cond = {}) {
  return detail::responsibilities_from(detail::component_terms(gm, z, alpha, sigma, cond));
}

/// grad_z log q = sum_k r_k (alpha mu_k - z) / v_k
inline Vec gm_score(const GaussianMixture& gm, const Vec& z, double alpha, double sigma, const Condition& cond = {}) {
  auto terms = detail::component_terms(gm, z, alpha, sigma, cond);
  auto r = detail::responsibilities_from(terms);
  Vec out = Vec::Zero(z.size());
  for (std::size_t k = 0; k < r.size(); ++k) {
    if (r[k] == 0.0) continue;
    out += r[k] * (alpha * gm.components()[k].mean - z) / terms.var[k];
  }
  return out;
}

/// Posterior mean E[x | z_t] = sum_k r_k (mu_k + alpha s_k^2 (z - alpha mu_k) / v_k).
inline Vec gm_denoiser_at(const GaussianMixture& gm, const Vec& z, double alpha, double sigma,
                          const Condition& cond = {}) {
  if (z.size() != gm.dim()) throw std::invalid_argument("mixture evaluation: dimension mismatch");
  const auto& lw = gm.log_weights(cond);
  const auto& comps = gm.components();
  const double d = static_cast<double>(gm.dim());
  // log N(z | alpha mu_k, v_k I) up to the shared -d/2 log(2 pi)
  auto log_joint = [&](std::size_t k, double v) {
    return lw[k] - 0.5 * d * std::log(v) - 0.5 * (z - alpha * comps[k].mean).squaredNorm() / v;
  };
  constexpr std::size_t kCached = 16;
  std::array<double, kCached> cache{};
  double max_log = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < comps.size(); ++k) {
    const double v = alpha * alpha * comps[k].scale * comps[k].scale + sigma * sigma;
    const double lj = (v > 0.0 && std::isfinite(lw[k])) ? log_joint(k, v) : -std::numeric_limits<double>::infinity();
    if (k < kCached) cache[k] = lj;
    max_log = std::max(max_log, lj);
  }
  if (!std::isfinite(max_log)) throw std::domain_error("mixture evaluation: alpha^2 s_k^2 + sigma^2 = 0 for every component");
  Vec out = Vec::Zero(z.size());
  double total = 0.0;
  for (std::size_t k = 0; k < comps.size(); ++k) {
    const auto& c = comps[k];
    const double s2 = c.scale * c.scale;
    const double v = alpha * alpha * s2 + sigma * sigma;
    if (!(v > 0.0) || !std::isfinite(lw[k])) continue;
    const double w = std::exp((k < kCached ? cache[k] : log_joint(k, v)) - max_log);
    if (w == 0.0) continue;
    total += w;
    out += w * (c.mean + (alpha * s2 / v) * (z - alpha * c.mean));
  }
  return out / total;
}

inline Vec gm_denoiser(const GaussianMixture& gm, const Vec& z, double t, const NoiseParam& param,
                       const Condition& cond = {}) {
  return gm_denoiser_at(gm, z, param.alpha(t), param.sigma(t), cond);
}

inline Prediction GaussianMixture::predict(const Vec& z, double t, const NoiseParam& param,
                                           const Condition& cond) const {
  const double alpha = param.alpha(t);
  const double sigma = param.sigma(t);
  Vec x = gm_denoiser_at(*this, z, alpha, sigma, cond);
  if (sigma == 0.0) return {Vec::Zero(z.size()), std::move(x)};
  Vec eps = (z - alpha * x) / sigma;
  return {std::move(eps), std::move(x)};
}

inline Vec GaussianMixture::denoised(const Vec& z, double t, const NoiseParam& param, const Condition& cond) const {
  return gm_denoiser_at(*this, z, param.alpha(t), param.sigma(t), cond);
}

/// eps = eps_null + w (eps_cond - eps_null), with the data prediction derived
/// from the combined noise.
template <ScoreModel M>
Prediction guided_prediction(const M& model, const Vec& z, double t, const NoiseParam& param, const Condition& cond,
                             double w) {
  if (cond.is_null()) throw std::invalid_argument("guided_prediction: needs a non-null condition");
  if (!std::isfinite(w)) throw std::invalid_argument("guided_prediction: guidance scale must be finite");
  if (param.sigma(t) == 0.0) throw std::domain_error("guided_prediction: sigma(t) = 0");
  const Prediction uncond = model.predict(z, t, param, Condition::null());
  const Prediction conditional = model.predict(z, t, param, cond);
  Vec eps = uncond.noise + w * (conditional.noise - uncond.noise);
  return convert_predictions(z, t, param, PredictionForm::noise, eps);
}

/// Classifier-free guided view of a model: conditional evaluations return the
/// guided combination, null-condition evaluations pass through.
template <ScoreModel M>
class Guided {
 public:
  Guided(const M& model, double scale) : model_(&model), scale_(scale) {
    if (!std::isfinite(scale)) throw std::invalid_argument("Guided: guidance scale must be finite");
  }

  Prediction predict(const Vec& z, double t, const NoiseParam& param, const Condition& cond) const {
    if (cond.is_null()) return model_->predict(z, t, param, cond);
    return guided_prediction(*model_, z, t, param, cond, scale_);
  }
  Eigen::Index dim() const { return model_->dim(); }
  double scale() const { return scale_; }
  const M& base() const { return *model_; }

 private:
  const M* model_;
  double scale_;
};

/// Draws x ~ p_data (optionally under a condition's reweighting).
template <class Engine>
Vec sample_mixture(const GaussianMixture& gm, Engine& eng, const Condition& cond = {}) {
  const auto& lw = gm.log_weights(cond);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  double u = u01(eng);
  std::size_t k = 0;
  for (; k + 1 < lw.size(); ++k) {
    const double w = std::isfinite(lw[k]) ? std::exp(lw[k]) : 0.0;
    if (u < w) break;
    u -= w;
  }
  // skip trailing zero-weight components selected by round-off
  while (!std::isfinite(lw[k]) && k > 0) --k;
  std::normal_distribution<double> n01(0.0, 1.0);
  const auto& c = gm.components()[k];
  Vec x(gm.dim());
  for (Eigen::Index j = 0; j < x.size(); ++j) x[j] = c.mean[j] + c.scale * n01(eng);
  return x;
}

}  // namespace iia
