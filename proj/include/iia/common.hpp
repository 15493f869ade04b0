// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <stdexcept>
#include <string>

namespace iia {

using Vec = Eigen::VectorXd;

inline constexpr int kLibraryVersion = 1;

inline void require(bool cond, const std::string& what) {
  if (!cond) throw std::invalid_argument(what);
}

inline bool all_finite(const Vec& v) { return v.allFinite(); }

}  // namespace iia
