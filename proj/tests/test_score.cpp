// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "iia/random_models.hpp"
#include "iia/score.hpp"

using namespace iia;

namespace {
Vec v2(double a, double b) { return (Vec(2) << a, b).finished(); }

GaussianMixture three() {
  GaussianMixture gm({{0.5, v2(-4, 0), 1.0}, {0.3, v2(4, 0), 1.0}, {0.2, v2(0, 5), 1.0}});
  gm.add_class_conditions();
  return gm;
}
}  // namespace

TEST(GaussianMixture, ValidatesAndNormalizes) {
  EXPECT_THROW(GaussianMixture(std::vector<MixtureComponent>{}), std::invalid_argument);
  EXPECT_THROW(GaussianMixture({{0.0, v2(0, 0), 1.0}}), std::invalid_argument);
  EXPECT_THROW(GaussianMixture({{1.0, v2(0, 0), -1.0}}), std::invalid_argument);
  EXPECT_THROW(GaussianMixture({{1.0, v2(0, 0), 1.0}, {1.0, Vec::Zero(3), 1.0}}), std::invalid_argument);
  GaussianMixture gm({{2.0, v2(0, 0), 1.0}, {6.0, v2(1, 0), 1.0}});
  EXPECT_DOUBLE_EQ(gm.components()[0].weight, 0.25);
  EXPECT_DOUBLE_EQ(gm.components()[1].weight, 0.75);
  EXPECT_EQ(gm.dim(), 2);
}

TEST(GaussianMixture, ConditionsValidate) {
  auto gm = three();
  EXPECT_THROW(gm.add_condition("bad", {1.0, 0.0}), std::invalid_argument);
  EXPECT_THROW(gm.add_condition("zero", {0.0, 0.0, 0.0}), std::invalid_argument);
  EXPECT_THROW(gm.add_condition("neg", {-1.0, 1.0, 1.0}), std::invalid_argument);
  EXPECT_THROW(gm.log_weights(Condition::of("nope")), std::invalid_argument);
  EXPECT_TRUE(gm.has_condition("class2"));
  EXPECT_EQ(gm.condition_labels(), (std::vector<std::string>{"class0", "class1", "class2"}));
}

TEST(GaussianMixture, SingleGaussianDenoiserClosedForm) {
  std::mt19937_64 eng(3);
  for (int k = 0; k < 100; ++k) {
    const Vec mu = gen::normal_vec(eng, 3, 2.0);
    const double s = gen::uniform(eng, 0.0, 2.0);
    GaussianMixture gm({{1.0, mu, s}});
    const double a = gen::uniform(eng, 0.1, 1.0), sig = gen::uniform(eng, 0.01, 5.0);
    const Vec z = gen::normal_vec(eng, 3, 3.0);
    const Vec expect = mu + (a * s * s / (a * a * s * s + sig * sig)) * (z - a * mu);
    EXPECT_LT((gm_denoiser_at(gm, z, a, sig) - expect).norm(), 1e-12 * (1.0 + expect.norm()));
    const Vec score = (a * mu - z) / (a * a * s * s + sig * sig);
    EXPECT_LT((gm_score(gm, z, a, sig) - score).norm(), 1e-12 * (1.0 + score.norm()));
  }
}

TEST(GaussianMixture, PropertyScoreMatchesFiniteDifference) {
  std::mt19937_64 eng(4);
  for (int k = 0; k < 60; ++k) {
    const Eigen::Index d = static_cast<Eigen::Index>(gen::uniform_index(eng, 1, 4));
    const auto gm = gen::mixture(eng, d);
    const double a = gen::uniform(eng, 0.3, 1.0), s = gen::uniform(eng, 0.2, 3.0);
    const Vec z = gen::normal_vec(eng, d, 3.0);
    const Vec score = gm_score(gm, z, a, s);
    for (Eigen::Index j = 0; j < d; ++j) {
      const double h = 1e-5;
      Vec zp = z, zm = z;
      zp[j] += h;
      zm[j] -= h;
      const double fd = (gm_log_density(gm, zp, a, s) - gm_log_density(gm, zm, a, s)) / (2 * h);
      EXPECT_NEAR(score[j], fd, 1e-5 * std::max(1.0, score.norm()));
    }
  }
}

TEST(GaussianMixture, PropertyTweedieIdentity) {
  std::mt19937_64 eng(5);
  for (int k = 0; k < 200; ++k) {
    const Eigen::Index d = static_cast<Eigen::Index>(gen::uniform_index(eng, 1, 4));
    const auto gm = gen::mixture(eng, d);
    const auto p = k % 2 ? NoiseParam::ve() : NoiseParam::vp();
    const double t = p.kind == ParamKind::ve ? gen::log_uniform(eng, 0.01, 80.0) : gen::uniform(eng, 0.01, 1.0);
    const double a = p.alpha(t), s = p.sigma(t);
    const Vec z = gen::normal_vec(eng, d, 3.0 + s);
    const Vec den = gm_denoiser(gm, z, t, p);
    const Vec tweedie = (z + s * s * gm_score(gm, z, a, s)) / a;
    EXPECT_LT((den - tweedie).norm(), 1e-9 * std::max(1.0, den.norm()));
  }
}

TEST(GaussianMixture, PredictIsConsistent) {
  const auto gm = three();
  const auto p = NoiseParam::vp();
  const Vec z = v2(0.3, -1.2);
  const double t = 0.4;
  const auto pred = gm.predict(z, t, p, {});
  EXPECT_LT((p.alpha(t) * pred.denoised + p.sigma(t) * pred.noise - z).norm(), 1e-13);
  EXPECT_LT((gm.denoised(z, t, p, {}) - pred.denoised).norm(), 0.0 + 1e-15);
}

TEST(GaussianMixture, ZeroNoiseLevel) {
  const auto gm = three();
  const Vec z = v2(1.0, 2.0);
  const auto pred = gm.predict(z, 0.0, NoiseParam::ve(), {});
  EXPECT_EQ(pred.noise, Vec::Zero(2));
  EXPECT_LT((pred.denoised - z).norm(), 1e-14);
}

TEST(GaussianMixture, FarPointsStayFinite) {
  const auto gm = three();
  const Vec z = v2(1e4, -1e4);
  const Vec den = gm_denoiser_at(gm, z, 1.0, 0.01);
  EXPECT_TRUE(den.allFinite());
  const auto r = gm_responsibilities(gm, z, 1.0, 0.01);
  double total = 0.0;
  for (double x : r) total += x;
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(GaussianMixture, ClassConditionSelectsComponent) {
  const auto gm = three();
  const GaussianMixture only({{1.0, v2(4, 0), 1.0}});
  const Vec z = v2(0.5, 0.5);
  const Vec a = gm_denoiser_at(gm, z, 0.8, 0.6, Condition::of("class1"));
  const Vec b = gm_denoiser_at(only, z, 0.8, 0.6);
  EXPECT_LT((a - b).norm(), 1e-14);
}

TEST(ConvertPredictions, RoundTrip) {
  const auto p = NoiseParam::vp();
  const Vec z = v2(0.7, -0.1), eps = v2(0.2, 0.9);
  const auto from_noise = convert_predictions(z, 0.3, p, PredictionForm::noise, eps);
  const auto back = convert_predictions(z, 0.3, p, PredictionForm::denoised, from_noise.denoised);
  EXPECT_LT((back.noise - eps).norm(), 1e-13);
  EXPECT_THROW(convert_predictions(z, 0.0, p, PredictionForm::denoised, z), std::domain_error);
}

TEST(Guidance, CombinesNoisePredictions) {
  const auto gm = three();
  const auto p = NoiseParam::vp();
  const Vec z = v2(0.1, 0.2);
  const double t = 0.5;
  const Condition c = Condition::of("class2");
  const auto un = gm.predict(z, t, p, {});
  const auto co = gm.predict(z, t, p, c);
  EXPECT_LT((guided_prediction(gm, z, t, p, c, 0.0).noise - un.noise).norm(), 1e-14);
  EXPECT_LT((guided_prediction(gm, z, t, p, c, 1.0).noise - co.noise).norm(), 1e-14);
  const Vec w3 = guided_prediction(gm, z, t, p, c, 3.0).noise;
  EXPECT_LT((w3 - (un.noise + 3.0 * (co.noise - un.noise))).norm(), 1e-13);
  EXPECT_THROW(guided_prediction(gm, z, t, p, Condition::null(), 3.0), std::invalid_argument);
  EXPECT_THROW(guided_prediction(gm, z, 0.0, p, c, 3.0), std::domain_error);
  EXPECT_THROW(Guided<GaussianMixture>(gm, std::nan("")), std::invalid_argument);
  const Guided<GaussianMixture> g(gm, 3.0);
  EXPECT_LT((g.predict(z, t, p, c).noise - w3).norm(), 1e-15);
  EXPECT_EQ(g.predict(z, t, p, Condition::null()).noise, un.noise);
}

TEST(SampleMixture, MomentsMatch) {
  const auto gm = three();
  std::mt19937_64 eng(6);
  const int n = 200000;
  Vec mean = Vec::Zero(2);
  for (int k = 0; k < n; ++k) mean += sample_mixture(gm, eng);
  mean /= n;
  const Vec expect = 0.5 * v2(-4, 0) + 0.3 * v2(4, 0) + 0.2 * v2(0, 5);
  // per-coordinate stderr < 4.5 / sqrt(n)
  EXPECT_LT((mean - expect).lpNorm<Eigen::Infinity>(), 3.0 * 4.5 / std::sqrt(double(n)));
  std::mt19937_64 e2(7);
  for (int k = 0; k < 1000; ++k) {
    const Vec x = sample_mixture(gm, e2, Condition::of("class2"));
    EXPECT_GT(x[1], 0.0);
  }
}
