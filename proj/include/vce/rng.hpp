#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace vce {

/// Seeded Gaussian source with a fully specified algorithm, so draws can be
/// reproduced outside this library:
///
///   engine   std::mt19937_64 seeded with the 64-bit seed (the engine is fixed by the C++ standard)
///   uniform  u = ((x >> 11) + 0.5) * 2^-53, strictly inside (0, 1)
///   normal   Box-Muller, pairs (z0, z1) = sqrt(-2 ln u1) * (cos, sin)(2 pi u2), z0 emitted first
///
/// std::normal_distribution is not used because its algorithm is implementation-defined.
class GaussianRng {
 public:
  explicit GaussianRng(std::uint64_t seed) : engine_(seed) {}

  double uniform() {
    const std::uint64_t x = engine_();
    return (static_cast<double>(x >> 11) + 0.5) * 0x1.0p-53;
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform integer in [0, n) by rejection; n > 0.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace vce
