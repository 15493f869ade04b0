// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <random>
#include <set>

#include "iia/config.hpp"
#include "iia/iia.hpp"
#include "iia/metrics.hpp"
#include "iia/random_models.hpp"
#include "iia/table_io.hpp"

using namespace iia;

namespace {

// VE model whose probability-flow drift is the constant vector c.
struct ConstantDrift {
  Vec c;
  Prediction predict(const Vec& z, double t, const NoiseParam&, const Condition&) const { return {c, z - t * c}; }
  Eigen::Index dim() const { return c.size(); }
};

TimeGrid grid_for(Variant v, std::size_t n) {
  const auto cfg = default_config(v);
  GridSpec s = cfg.grid;
  s.steps = n;
  return build_grid(s, cfg.param);
}

template <class Fn>
void with_model(Variant v, const GaussianMixture& gm, Fn&& fn) {
  if (is_guided(v)) fn(Guided<GaussianMixture>(gm, 3.0));
  else fn(gm);
}

CalibrationBatch batch_for(Variant v, const GaussianMixture& gm, const TimeGrid& g, std::size_t size,
                           std::uint64_t seed) {
  return make_calibration_batch(gm.dim(), g, size, seed, is_guided(v) ? gm.condition_labels() : std::vector<std::string>{});
}

}  // namespace

TEST(Variants, NamesRoundTrip) {
  for (Variant v : kAllVariants) EXPECT_EQ(parse_variant(to_string(v)), v);
  EXPECT_FALSE(try_parse_variant("iia_rk4").has_value());
  EXPECT_THROW(parse_variant("iia_rk4"), std::invalid_argument);
  EXPECT_EQ(base_solver(Variant::iia_ddim_guided), Solver::ddim);
  EXPECT_EQ(base_solver(Variant::biia_edm), Solver::heun);
  EXPECT_FALSE(is_additive(Variant::iia_edm));
  EXPECT_TRUE(is_additive(Variant::iia_ipndm));
}

TEST(Variants, FeatureCounts) {
  EXPECT_EQ(feature_count(Variant::biia_edm, 0, 5, false), 1u);
  EXPECT_EQ(feature_count(Variant::biia_edm, 2, 1, false), 2u);
  EXPECT_EQ(feature_count(Variant::biia_edm, 2, 4, false), 3u);
  EXPECT_EQ(feature_count(Variant::iia_edm, 0, 3, false), 2u);
  EXPECT_EQ(feature_count(Variant::iia_edm, 1, 3, false), 4u);
  EXPECT_EQ(feature_count(Variant::iia_ddim, 1, 0, false), 0u);
  EXPECT_EQ(feature_count(Variant::iia_ddim, 1, 1, false), 2u);
  EXPECT_EQ(feature_count(Variant::iia_ddim_guided, 1, 0, false), 1u);
  EXPECT_EQ(feature_count(Variant::iia_dpm2m, 1, 0, false), 2u);
  for (Variant v : kAllVariants) EXPECT_EQ(feature_count(v, 1, 3, true), 0u);
  EXPECT_EQ(history_depth(1), 4u);
  EXPECT_EQ(history_depth(5), 6u);
}

TEST(Features, MissingRecordFieldsThrow) {
  const auto gm = default_mixture();
  const auto rec = ddim_kernel(gm, Vec::Ones(2), 0, 0.5, 0.4, NoiseParam::vp(), {}).record;
  EXPECT_THROW(assemble_features(Variant::iia_edm, 0, rec, History{}), std::logic_error);
  const auto f = assemble_features(Variant::iia_dpm2m, 0, rec, History{});
  ASSERT_EQ(f.size(), 2u);
  EXPECT_EQ(f[0], Vec::Ones(2));
}

TEST(Features, IdenticalRecordsGiveZeroDifferences) {
  const auto gm = default_mixture();
  StepRecord rec = ddim_kernel(gm, Vec::Ones(2), 1, 0.5, 0.4, NoiseParam::vp(), {}).record;
  rec.eps_tilde = rec.noise;
  History h;
  h.push(rec);
  for (Variant v : {Variant::iia_ddim, Variant::iia_spndm, Variant::iia_ipndm}) {
    const auto f = assemble_features(v, 1, rec, h);
    ASSERT_EQ(f.size(), 2u);
    EXPECT_EQ(f[0], Vec::Zero(2));
    EXPECT_EQ(f[1], Vec::Zero(2));
  }
}

TEST(Embedding, PropertyBaselineCoefficientsReproduceBaseline) {
  std::mt19937_64 eng(30);
  for (int rep = 0; rep < 40; ++rep) {
    const auto gm = gen::mixture(eng, 2);
    for (Variant v : kAllVariants) {
      const std::size_t r = gen::uniform_index(eng, 0, 2);
      const auto g = grid_for(v, gen::uniform_index(eng, 3, 9));
      with_model(v, gm, [&](const auto& model) {
        Vec z = gen::normal_vec(eng, 2, g.param().sigma(g[0]));
        const Condition cond = is_guided(v) ? Condition::of("class0") : Condition::null();
        History h(history_depth(r));
        for (std::size_t i = 0; i < g.steps(); ++i) {
          const auto probe = iia_step(v, r, model, z, i, g[i], g[i + 1], g.param(), cond, h, std::nullopt);
          const Vec c = baseline_coefficients(v, probe.features.size(), g[i], g[i + 1]);
          const auto res = iia_step(v, r, model, z, i, g[i], g[i + 1], g.param(), cond, h, std::optional<Vec>(c));
          EXPECT_LE((res.z_next - probe.base.z_next).norm() / std::max(1.0, probe.base.z_next.norm()), 1e-12)
              << to_string(v) << " step " << i;
          z = probe.base.z_next;
          h.push(probe.base.record);
        }
      });
    }
  }
}

TEST(IiaStep, ValidatesInputs) {
  const auto gm = default_mixture();
  const auto g = grid_for(Variant::iia_edm, 4);
  History h;
  EXPECT_THROW(iia_step(Variant::iia_edm, 1, gm, Vec::Ones(2), 0, g[0], g[1], g.param(), {}, h,
                        std::optional<Vec>(Vec::Ones(3))),
               std::invalid_argument);
  EXPECT_THROW(iia_step(Variant::iia_edm, 1, gm, Vec::Ones(2), 0, 0.5, 0.4, NoiseParam::vp(), {}, h, std::nullopt),
               std::invalid_argument);
  try {
    iia_step(Variant::iia_edm, 1, gm, Vec::Ones(2), 0, g[0], g[1], g.param(), {}, h, std::optional<Vec>(Vec::Ones(3)));
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
  }
}

TEST(FineOracle, SingleSubstepEqualsCoarseIncrement) {
  const auto gm = default_mixture();
  std::mt19937_64 eng(31);
  for (Variant v : kAllVariants) {
    const auto g = grid_for(v, 6);
    with_model(v, gm, [&](const auto& model) {
      const Condition cond = is_guided(v) ? Condition::of("class1") : Condition::null();
      Vec z = gen::normal_vec(eng, 2, g.param().sigma(g[0]));
      History h(history_depth(1));
      for (std::size_t i = 0; i < g.steps(); ++i) {
        const auto s = baseline_step(base_solver(v), model, z, i, g[i], g[i + 1], g.param(), cond, h);
        EXPECT_EQ(fine_oracle(v, model, z, i, g, cond, h, 1), s.increment) << to_string(v) << " step " << i;
        z = s.z_next;
        h.push(s.record);
      }
    });
  }
}

TEST(FineOracle, ConstantDriftIsExactForAnyRefinement) {
  const ConstantDrift model{(Vec(3) << 0.5, -1.0, 2.0).finished()};
  const auto g = grid_for(Variant::iia_edm, 5);
  for (std::size_t i = 0; i < g.steps(); ++i) {
    for (std::size_t M : {1u, 2u, 7u, 16u}) {
      const Vec inc = fine_oracle(Variant::iia_edm, model, Vec::Zero(3), i, g, {}, History{}, M);
      EXPECT_LT((inc - (g[i + 1] - g[i]) * model.c).norm(), 1e-12 * g[i]);
    }
  }
}

TEST(FineOracle, ConvergesAtSecondOrder) {
  GaussianMixture gm({{1.0, Vec::Zero(2), 1.0}});
  const auto p = NoiseParam::ve();
  const Vec z = (Vec(2) << 1.5, -0.5).finished();
  const double t = 2.0, tn = 1.0;
  const Vec exact = std::sqrt((1.0 + tn * tn) / (1.0 + t * t)) * z;
  std::vector<double> err;
  for (std::size_t M : {2u, 4u, 8u, 16u})
    err.push_back((z + fine_oracle(Solver::heun, gm, z, 0, t, tn, p, {}, History{}, M) - exact).norm());
  for (std::size_t k = 1; k < err.size(); ++k) EXPECT_NEAR(err[k - 1] / err[k], 4.0, 0.3);
}

TEST(Calibration, BatchIsSeededAndLabelled) {
  const auto gm = default_mixture();
  const auto g = grid_for(Variant::iia_ddim_guided, 5);
  const auto a = make_calibration_batch(2, g, 100, 7, gm.condition_labels(), 20);
  const auto b = make_calibration_batch(2, g, 100, 7, gm.condition_labels(), 20);
  const auto c = make_calibration_batch(2, g, 100, 8, gm.condition_labels(), 20);
  EXPECT_EQ(a.z0, b.z0);
  EXPECT_NE(a.z0, c.z0);
  std::set<std::string> labels;
  for (const auto& cond : a.conditions) {
    ASSERT_FALSE(cond.is_null());
    EXPECT_TRUE(gm.has_condition(*cond.label));
    labels.insert(*cond.label);
  }
  EXPECT_GT(labels.size(), 1u);
  const auto ev = make_calibration_batch(2, g, 100, 7, {}, 20, Stream::evaluation);
  EXPECT_NE(ev.z0, a.z0);
  EXPECT_TRUE(ev.conditions.front().is_null());
  EXPECT_THROW(make_calibration_batch(2, g, 0, 7), std::invalid_argument);
}

TEST(Calibration, InitialStatesHaveTheRightScale) {
  const auto g = grid_for(Variant::iia_edm, 5);
  const auto b = make_calibration_batch(2, g, 4000, 3);
  double ss = 0.0;
  for (const auto& z : b.z0) ss += z.squaredNorm();
  const double var = ss / (2.0 * 4000.0);
  EXPECT_NEAR(var / (80.0 * 80.0), 1.0, 0.08);
}

TEST(Calibration, SingleSubstepReproducesBaselineSampler) {
  const auto gm = default_mixture();
  for (Variant v : kAllVariants) {
    const auto g = grid_for(v, 5);
    const auto batch = batch_for(v, gm, g, 12, 4);
    CalibrationOptions opt;
    opt.M = 1;
    with_model(v, gm, [&](const auto& model) {
      const auto table = calibrate(v, model, g, batch, opt);
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto base = run_sampler(base_solver(v), model, g, batch.z0[b], batch.conditions[b]);
        const auto iia = run_sampler(base_solver(v), model, g, batch.z0[b], batch.conditions[b], &table);
        EXPECT_LE((iia.terminal.z - base.terminal.z).norm() / std::max(1.0, base.terminal.z.norm()), 1e-10)
            << to_string(v);
        EXPECT_EQ(iia.nfe, base.nfe);
      }
    });
  }
}

TEST(Calibration, PropertyResidualDominanceEveryVariant) {
  std::mt19937_64 eng(32);
  for (int rep = 0; rep < 3; ++rep) {
    const auto gm = gen::mixture(eng, 2);
    for (Variant v : kAllVariants) {
      const auto g = grid_for(v, 6);
      const auto batch = batch_for(v, gm, g, 16, 100 + rep);
      CalibrationOptions opt;
      opt.M = gen::uniform_index(eng, 2, 4);
      opt.r = gen::uniform_index(eng, 0, 2);
      with_model(v, gm, [&](const auto& model) {
        const auto table = calibrate(v, model, g, batch, opt);
        const auto rows = residual_curve(v, model, g, &table, batch, opt.M, opt.r);
        for (std::size_t i = 0; i < g.steps(); ++i) {
          const auto& s = table.steps[i];
          EXPECT_LE(s.iia_mse, s.baseline_mse * (1 + 1e-12) + 1e-300) << to_string(v) << " step " << i;
          // residual_curve re-evaluates the same states from scratch
          const double base = rows[2 * i].value, iia = rows[2 * i + 1].value;
          EXPECT_LE(iia, base * (1 + 1e-12) + 1e-300) << to_string(v) << " step " << i;
          if (!s.coeffs.empty()) {
            EXPECT_NEAR(iia, s.iia_mse, 1e-9 * std::max(s.iia_mse, 1e-300) + 1e-300);
            EXPECT_NEAR(base, s.baseline_mse, 1e-9 * s.baseline_mse + 1e-300);
          }
        }
      });
    }
  }
}

TEST(Calibration, NormalEquationsHoldAtWellConditionedSteps) {
  const auto gm = default_mixture();
  for (Variant v : {Variant::biia_edm, Variant::iia_edm, Variant::iia_dpm2m, Variant::iia_ddim_guided}) {
    const auto g = grid_for(v, 6);
    const auto batch = batch_for(v, gm, g, 24, 5);
    CalibrationOptions opt;
    opt.trajectory = TrajectoryPolicy::baseline;
    with_model(v, gm, [&](const auto& model) {
      const auto table = calibrate(v, model, g, batch, opt);
      std::vector<Vec> z = batch.z0;
      std::vector<History> h(batch.size(), History(history_depth(opt.r)));
      for (std::size_t i = 0; i < g.steps(); ++i) {
        const auto& sc = table.steps[i];
        const auto coeffs = table.coefficients_at(i);
        std::vector<double> dot(sc.coeffs.size(), 0.0), fn(sc.coeffs.size(), 0.0);
        double rn = 0.0, yn = 0.0;
        for (std::size_t b = 0; b < batch.size(); ++b) {
          auto res = iia_step(v, opt.r, model, z[b], i, g[i], g[i + 1], g.param(), batch.conditions[b], h[b], coeffs);
          if (coeffs) {
            const Vec target = fine_oracle(v, model, z[b], i, g, batch.conditions[b], h[b], opt.M);
            const Vec res_vec = target - (res.z_next - z[b]);
            rn += res_vec.squaredNorm();
            yn += target.squaredNorm();
            for (std::size_t j = 0; j < res.features.size(); ++j) {
              dot[j] += res.features[j].dot(res_vec);
              fn[j] += res.features[j].squaredNorm();
            }
          }
          z[b] = res.base.z_next;
          h[b].push(res.base.record);
        }
        if (!coeffs || sc.ridge) continue;
        // residuals recomputed from full increments carry an eps * |target| floor
        for (std::size_t j = 0; j < dot.size(); ++j)
          EXPECT_LE(std::abs(dot[j]), 1e-8 * std::sqrt(fn[j] * rn) + 1e-13 * std::sqrt(fn[j] * yn))
              << to_string(v) << " step " << i << " j " << j;
      }
    });
  }
}

TEST(Calibration, CollinearAdditiveFeaturesAreRegularized) {
  const auto gm = default_mixture();
  const auto g = grid_for(Variant::iia_ddim, 6);
  const auto batch = make_calibration_batch(2, g, 16, 6);
  CalibrationOptions opt;
  opt.trajectory = TrajectoryPolicy::baseline;
  const auto table = calibrate(Variant::iia_ddim, gm, g, batch, opt);
  for (const auto& s : table.steps) {
    if (s.coeffs.empty()) continue;
    EXPECT_TRUE(s.ridge);
    for (double c : s.coeffs) EXPECT_TRUE(std::isfinite(c));
  }
}

TEST(Calibration, NestedFeatureSetsDominate) {
  const auto gm = default_mixture();
  const auto g = grid_for(Variant::biia_edm, 6);
  const auto batch = make_calibration_batch(2, g, 40, 7);
  CalibrationOptions opt;
  opt.trajectory = TrajectoryPolicy::baseline;
  opt.r = 0;
  const auto t0 = calibrate(Variant::biia_edm, gm, g, batch, opt);
  opt.r = 1;
  const auto t1 = calibrate(Variant::biia_edm, gm, g, batch, opt);
  for (std::size_t i = 0; i < g.steps(); ++i) {
    EXPECT_LE(t1.steps[i].iia_mse, t0.steps[i].iia_mse * (1 + 1e-10) + 1e-300) << "step " << i;
    EXPECT_NEAR(t1.steps[i].baseline_mse, t0.steps[i].baseline_mse, 1e-15 * t0.steps[i].baseline_mse + 1e-300);
  }
}

TEST(Calibration, ZeroHistoryGammaMatchesClosedForm) {
  const auto gm = default_mixture();
  const auto g = grid_for(Variant::biia_edm, 6);
  const auto batch = make_calibration_batch(2, g, 30, 8);
  CalibrationOptions opt;
  opt.trajectory = TrajectoryPolicy::baseline;
  opt.r = 0;
  opt.M = 4;
  const auto table = calibrate(Variant::biia_edm, gm, g, batch, opt);
  std::vector<Vec> z = batch.z0;
  for (std::size_t i = 0; i < g.steps(); ++i) {
    std::vector<Vec> delta, target;
    for (auto& zb : z) {
      const auto s = heun_kernel(gm, zb, i, g[i], g[i + 1], g.param(), {});
      delta.push_back(0.5 * (*s.record.drift + (s.record.drift_pred ? *s.record.drift_pred : *s.record.drift)));
      target.push_back(fine_oracle(Solver::heun, gm, zb, i, g[i], g[i + 1], g.param(), {}, History{}, 4));
      zb = s.z_next;
    }
    if (g.terminal_slot(i)) {
      EXPECT_TRUE(table.steps[i].coeffs.empty());
      continue;
    }
    const double gamma = closed_form_gamma_r0(delta, target) / (g[i + 1] - g[i]);
    EXPECT_NEAR(table.reported_coefficients(i)[0], gamma, 1e-10 * std::abs(gamma)) << "step " << i;
  }
}

TEST(Calibration, DeterministicAcrossWorkerCounts) {
  const auto gm = default_mixture();
  for (Variant v : {Variant::iia_edm, Variant::iia_ipndm, Variant::iia_ddim_guided}) {
    const auto g = grid_for(v, 5);
    const auto batch = batch_for(v, gm, g, 24, 9);
    CalibrationOptions opt;
    opt.guidance_scale = is_guided(v) ? 3.0 : 0.0;
    with_model(v, gm, [&](const auto& model) {
      opt.workers = 1;
      const auto a = table_to_string(calibrate(v, model, g, batch, opt));
      opt.workers = 3;
      const auto b = table_to_string(calibrate(v, model, g, batch, opt));
      EXPECT_EQ(a, b) << to_string(v);
    });
  }
}

TEST(Calibration, RejectsBadInputs) {
  const auto gm = default_mixture();
  const auto g = grid_for(Variant::iia_ddim, 4);
  auto batch = make_calibration_batch(2, g, 4, 1);
  CalibrationOptions opt;
  opt.M = 0;
  EXPECT_THROW(calibrate(Variant::iia_ddim, gm, g, batch, opt), std::invalid_argument);
  opt.M = 3;
  EXPECT_THROW(calibrate(Variant::iia_edm, gm, g, batch, opt), std::invalid_argument);
  auto wrong_dim = make_calibration_batch(3, g, 4, 1);
  EXPECT_THROW(calibrate(Variant::iia_ddim, gm, g, wrong_dim, opt), std::invalid_argument);
  batch.conditions.pop_back();
  EXPECT_THROW(calibrate(Variant::iia_ddim, gm, g, batch, opt), std::invalid_argument);
  GaussianMixture one_d({{1.0, Vec::Zero(1), 1.0}});
  const auto tiny = make_calibration_batch(1, grid_for(Variant::iia_edm, 4), 1, 1);
  EXPECT_THROW(calibrate(Variant::iia_edm, one_d, grid_for(Variant::iia_edm, 4), tiny, opt), std::invalid_argument);
}

TEST(Sampler, ValidatesTables) {
  const auto gm = default_mixture();
  const auto g = grid_for(Variant::iia_edm, 4);
  const auto batch = make_calibration_batch(2, g, 8, 1);
  const auto table = calibrate(Variant::iia_edm, gm, g, batch, {});
  EXPECT_NO_THROW(run_sampler(Solver::heun, gm, g, batch.z0[0], {}, &table));
  EXPECT_THROW(run_sampler(Solver::ddim, gm, g, batch.z0[0], {}, &table), std::invalid_argument);
  EXPECT_THROW(run_sampler(Solver::heun, gm, grid_for(Variant::iia_edm, 5), batch.z0[0], {}, &table),
               std::invalid_argument);
  EXPECT_THROW(run_sampler(Solver::heun, gm, g, Vec::Ones(3)), std::invalid_argument);
  const auto res = run_sampler(Solver::heun, gm, g, batch.z0[0]);
  EXPECT_EQ(res.nfe, grid_nfe(Solver::heun, g));
  EXPECT_EQ(res.records.size(), g.steps());
  EXPECT_EQ(res.terminal.t, 0.0);
}

TEST(Table, ValidateNamesTheStep) {
  const auto gm = default_mixture();
  const auto g = grid_for(Variant::iia_edm, 4);
  auto table = calibrate(Variant::iia_edm, gm, g, make_calibration_batch(2, g, 8, 1), {});
  EXPECT_NO_THROW(table.validate());
  auto bad = table;
  bad.steps[2].coeffs.push_back(1.0);
  try {
    bad.validate();
    FAIL() << "expected a validation error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("step 2"), std::string::npos);
  }
  bad = table;
  bad.steps[1].coeffs[0] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = table;
  bad.steps.pop_back();
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}
