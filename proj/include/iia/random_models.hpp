// SPDX-License-Identifier: Apache-2.0
//
// Seeded generators for random mixtures, states and problems.
#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "iia/least_squares.hpp"
#include "iia/schedule.hpp"
#include "iia/score.hpp"

namespace iia::gen {

template <class Engine>
double uniform(Engine& eng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(eng);
}

template <class Engine>
std::size_t uniform_index(Engine& eng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(eng);
}

template <class Engine>
double log_uniform(Engine& eng, double lo, double hi) {
  return std::exp(uniform(eng, std::log(lo), std::log(hi)));
}

/// Mixture with 1..max_components components in dimension dim, means in
/// [-spread, spread], scales in [0.3, 2], and class conditions.
template <class Engine>
GaussianMixture mixture(Engine& eng, Eigen::Index dim, std::size_t max_components = 4, double spread = 4.0) {
  const std::size_t k = uniform_index(eng, 1, max_components);
  std::vector<MixtureComponent> comps;
  for (std::size_t c = 0; c < k; ++c) {
    Vec mean(dim);
    for (Eigen::Index j = 0; j < dim; ++j) mean[j] = uniform(eng, -spread, spread);
    comps.push_back({uniform(eng, 0.1, 1.0), std::move(mean), uniform(eng, 0.3, 2.0)});
  }
  GaussianMixture gm(std::move(comps));
  gm.add_class_conditions();
  return gm;
}

template <class Engine>
Vec normal_vec(Engine& eng, Eigen::Index dim, double scale = 1.0) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Vec v(dim);
  for (Eigen::Index j = 0; j < dim; ++j) v[j] = scale * n01(eng);
  return v;
}

/// Random least-squares problem: n features in dimension dim over a batch.
template <class Engine>
std::pair<std::vector<FeatureSet>, std::vector<Vec>> ls_problem(Engine& eng, std::size_t batch, std::size_t n,
                                                                Eigen::Index dim) {
  std::vector<FeatureSet> feats(batch);
  std::vector<Vec> targets(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t j = 0; j < n; ++j) feats[b].push_back(normal_vec(eng, dim, uniform(eng, 0.1, 3.0)));
    targets[b] = normal_vec(eng, dim);
  }
  return {std::move(feats), std::move(targets)};
}

}  // namespace iia::gen
