// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>

#include "iia/common.hpp"

namespace iia {

/// Stream namespaces. Calibration draws never share a stream with evaluation.
enum class Stream : std::uint64_t { calibration = 0, evaluation = 1 };

/// Independent sub-sequences within a stream.
enum class Lane : std::uint64_t { noise = 0, label = 1, projection = 2, data = 3 };

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Counter-based keyed generator: the engine for (seed, stream, lane, index)
/// depends only on the key, so draws are independent of evaluation order.
inline std::mt19937_64 keyed_engine(std::uint64_t seed, Stream stream, Lane lane,
                                    std::uint64_t index) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ static_cast<std::uint64_t>(stream));
  h = splitmix64(h ^ (static_cast<std::uint64_t>(lane) << 32));
  h = splitmix64(h ^ index);
  std::seed_seq seq{static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
  return std::mt19937_64(seq);
}

inline Vec standard_normal(std::mt19937_64& eng, Eigen::Index dim) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Vec out(dim);
  for (Eigen::Index k = 0; k < dim; ++k) out[k] = n01(eng);
  return out;
}

}  // namespace iia
