// SPDX-License-Identifier: Apache-2.0
//
// Seeded RNG used for all synthetic data and parameter init. Self-contained
// (splitmix64 + Box-Muller) so that streams are identical across platforms
// and standard-library versions.

#pragma once

#include <cmath>
#include <cstdint>

namespace srm {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // (0, 1]; never returns 0 so it is safe under log().
  double uniform01() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  double normal() {
    const double u1 = uniform01();
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Independent stream per (seed, index) pair.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
    Rng r(seed ^ (stream * 0xD6E8FEB86659FD93ULL + 0xA5A5A5A5A5A5A5A5ULL));
    r.next_u64();
    return r.next_u64();
  }

 private:
  std::uint64_t state_;
};

}  // namespace srm
