// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace sste {

/// splitmix64 finalizer. Full-avalanche mixing; used both as a generator step
/// and to fold key material into stream seeds.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Counter-based deterministic random stream. The state is derived from the
/// key material alone, so the same (seed, label, step, index) always yields
/// the same sequence regardless of platform or call ordering elsewhere.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : base_(mix64(seed)) {}

  RngStream(std::uint64_t seed, std::string_view label, std::uint64_t step = 0,
            std::uint64_t index = 0) {
    std::uint64_t h = mix64(seed);
    h = mix64(h ^ fnv1a64(label));
    h = mix64(h ^ step);
    h = mix64(h ^ index);
    base_ = h;
  }

  std::uint64_t next_u64() { return mix64(base_ + ++counter_ * 0x9e3779b97f4a7c15ULL); }

  /// Uniform double in [0, 1) with 53 random bits.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller. Hand-rolled so sequences are identical
  /// across standard libraries.
  double next_gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = next_unit();
    double u2 = next_unit();
    while (u1 <= 0.0) u1 = next_unit();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  /// Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n) {
    return n == 0 ? 0 : next_u64() % n;
  }

 private:
  std::uint64_t base_ = 0;
  std::uint64_t counter_ = 0;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace sste
