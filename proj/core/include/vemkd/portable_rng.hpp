#pragma once

#include <cstdint>
#include <random>

namespace vemkd {

// std distributions are implementation-defined; these are not.

/// Uniform in [0, 1) from the top 53 bits of one draw.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0);
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

/// Integer in [0, n).
inline uint64_t uniform_index(std::mt19937_64& rng, uint64_t n) { return rng() % n; }

}  // namespace vemkd
