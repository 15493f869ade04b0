// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <random>

#include <Eigen/QR>

#include "iia/least_squares.hpp"
#include "iia/random_models.hpp"

using namespace iia;

namespace {

// Dense stacked design matrix: one row block per sample.
Vec stacked_solution(const std::vector<FeatureSet>& f, const std::vector<Vec>& y) {
  const Eigen::Index d = y.front().size();
  const auto n = static_cast<Eigen::Index>(f.front().size());
  Eigen::MatrixXd A(d * static_cast<Eigen::Index>(f.size()), n);
  Vec rhs(A.rows());
  for (std::size_t b = 0; b < f.size(); ++b) {
    const auto row = static_cast<Eigen::Index>(b) * d;
    for (Eigen::Index j = 0; j < n; ++j) A.block(row, j, d, 1) = f[b][static_cast<std::size_t>(j)];
    rhs.segment(row, d) = y[b];
  }
  return A.colPivHouseholderQr().solve(rhs);
}

double residual(const std::vector<FeatureSet>& f, const std::vector<Vec>& y, const Vec& c) {
  double s = 0.0;
  for (std::size_t b = 0; b < f.size(); ++b) s += (y[b] - combine_features(f[b], c, y[b].size())).squaredNorm();
  return s;
}

}  // namespace

TEST(LeastSquares, PerfectFitRecoversCoefficients) {
  std::mt19937_64 eng(20);
  auto [f, y] = gen::ls_problem(eng, 30, 3, 4);
  const Vec truth = (Vec(3) << 0.5, -2.0, 1.25).finished();
  for (std::size_t b = 0; b < f.size(); ++b) y[b] = combine_features(f[b], truth, 4);
  const auto r = solve_least_squares(f, y);
  EXPECT_LT((r.coeffs - truth).norm(), 1e-12);
  EXPECT_FALSE(r.ridge);
  EXPECT_FALSE(r.degenerate);
}

TEST(LeastSquares, PropertyMatchesStackedQr) {
  std::mt19937_64 eng(21);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t batch = gen::uniform_index(eng, 2, 40);
    const std::size_t n = gen::uniform_index(eng, 1, 5);
    const auto d = static_cast<Eigen::Index>(gen::uniform_index(eng, 3, 6));
    auto [f, y] = gen::ls_problem(eng, batch, n, d);
    const auto r = solve_least_squares(f, y);
    const Vec oracle = stacked_solution(f, y);
    ASSERT_FALSE(r.ridge);
    EXPECT_LT((r.coeffs - oracle).norm(), 1e-8 * std::max(1.0, oracle.norm()));
  }
}

TEST(LeastSquares, PropertyNormalEquationsHold) {
  std::mt19937_64 eng(22);
  for (int rep = 0; rep < 200; ++rep) {
    auto [f, y] = gen::ls_problem(eng, gen::uniform_index(eng, 2, 30), gen::uniform_index(eng, 1, 4), 3);
    const auto r = solve_least_squares(f, y);
    for (std::size_t j = 0; j < f.front().size(); ++j) {
      double dot = 0.0, fn = 0.0, rn = 0.0;
      for (std::size_t b = 0; b < f.size(); ++b) {
        const Vec res = y[b] - combine_features(f[b], r.coeffs, 3);
        dot += f[b][j].dot(res);
        fn += f[b][j].squaredNorm();
        rn += res.squaredNorm();
      }
      EXPECT_LE(std::abs(dot), 1e-8 * std::sqrt(fn * rn) + 1e-300);
    }
  }
}

TEST(LeastSquares, PropertyNeverWorseThanZero) {
  std::mt19937_64 eng(23);
  for (int rep = 0; rep < 200; ++rep) {
    auto [f, y] = gen::ls_problem(eng, gen::uniform_index(eng, 1, 20), gen::uniform_index(eng, 1, 4), 2);
    if (rep % 3 == 0)
      for (auto& fs : f) fs.push_back(fs.front() * 2.0);  // exact collinearity
    const auto r = solve_least_squares(f, y);
    EXPECT_TRUE(r.coeffs.allFinite());
    EXPECT_LE(residual(f, y, r.coeffs), residual(f, y, Vec::Zero(r.coeffs.size())) * (1 + 1e-12));
  }
}

TEST(LeastSquares, AllZeroFeaturesAreDegenerate) {
  std::vector<FeatureSet> f(5, FeatureSet{Vec::Zero(2), Vec::Zero(2)});
  std::vector<Vec> y(5, Vec::Ones(2));
  const auto r = solve_least_squares(f, y);
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.coeffs, Vec::Zero(2));
}

TEST(LeastSquares, ZeroFeatureGetsZeroCoefficient) {
  std::mt19937_64 eng(24);
  auto [f, y] = gen::ls_problem(eng, 10, 2, 3);
  for (auto& fs : f) fs[1].setZero();
  const auto r = solve_least_squares(f, y);
  EXPECT_FALSE(r.degenerate);
  EXPECT_EQ(r.coeffs[1], 0.0);
  std::vector<Vec> single;
  for (auto& fs : f) single.push_back(fs[0]);
  EXPECT_NEAR(r.coeffs[0], closed_form_gamma_r0(single, y), 1e-12);
}

TEST(LeastSquares, CollinearFeaturesUseRidge) {
  std::mt19937_64 eng(25);
  auto [f, y] = gen::ls_problem(eng, 10, 1, 3);
  for (auto& fs : f) fs.push_back(-3.0 * fs[0]);
  const auto r = solve_least_squares(f, y);
  EXPECT_TRUE(r.ridge);
  EXPECT_GT(r.condition, kRidgeConditionThreshold);
  std::vector<Vec> single;
  for (auto& fs : f) single.push_back(fs[0]);
  const double g = closed_form_gamma_r0(single, y);
  // the fitted combination matches the single-feature optimum
  EXPECT_NEAR(r.coeffs[0] - 3.0 * r.coeffs[1], g, 1e-6 * std::max(1.0, std::abs(g)));
}

TEST(LeastSquares, InputValidation) {
  std::vector<FeatureSet> f{{Vec::Ones(2)}};
  EXPECT_THROW(solve_least_squares(f, std::vector<Vec>{}), std::invalid_argument);
  EXPECT_THROW(solve_least_squares(std::vector<FeatureSet>{}, std::vector<Vec>{}), std::invalid_argument);
  EXPECT_THROW(solve_least_squares(f, std::vector<Vec>{Vec::Ones(3)}), std::invalid_argument);
  std::vector<FeatureSet> ragged{{Vec::Ones(2)}, {Vec::Ones(2), Vec::Ones(2)}};
  EXPECT_THROW(solve_least_squares(ragged, std::vector<Vec>{Vec::Ones(2), Vec::Ones(2)}), std::invalid_argument);
  EXPECT_THROW(combine_features(f[0], Vec::Ones(2), 2), std::invalid_argument);
}

TEST(ClosedFormGamma, Examples) {
  const std::vector<Vec> d{Vec::Ones(2), 2.0 * Vec::Ones(2)};
  EXPECT_DOUBLE_EQ(closed_form_gamma_r0(d, std::vector<Vec>{2.0 * d[0], 2.0 * d[1]}), 2.0);
  const std::vector<Vec> e1{(Vec(2) << 1, 0).finished()};
  EXPECT_DOUBLE_EQ(closed_form_gamma_r0(e1, std::vector<Vec>{(Vec(2) << 0, 1).finished()}), 0.0);
  EXPECT_THROW(closed_form_gamma_r0(std::vector<Vec>{Vec::Zero(2)}, std::vector<Vec>{Vec::Ones(2)}), std::domain_error);
}
