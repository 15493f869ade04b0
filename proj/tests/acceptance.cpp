// SPDX-License-Identifier: Apache-2.0
#include <cstdio>
#include <vector>

#include "iia/checks.hpp"
#include "iia/parallel.hpp"

int main() {
  using namespace iia::checks;
  const unsigned workers = iia::default_workers();
  std::vector<CheckResult> results;
  auto report = [&](CheckResult r) {
    std::printf("%s criterion %d %s (%.2fs): %s\n", r.passed ? "PASS" : "FAIL", r.id, r.name.c_str(), r.seconds,
                r.detail.c_str());
    std::fflush(stdout);
    results.push_back(std::move(r));
  };
  report(reformulated_heun_equivalence());
  report(baseline_embedding());
  report(residual_dominance());
  report(nested_dominance());
  report(closed_form_gamma());
  report(oracle_convergence());
  report(terminal_improvement(2048, workers));
  report(default_hyperparameters());
  report(determinism());
  report(score_model_correctness());
  bool all = true;
  for (const auto& r : results) all = all && r.passed;
  return all ? 0 : 1;
}
