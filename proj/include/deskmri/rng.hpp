#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace deskmri {

/* Deterministic random source used everywhere in the pipeline.
 *
 * std::mt19937_64 is fully specified by the standard, but the distribution
 * adaptors are not; the conversions below are pinned so that identical seeds
 * give bit-identical streams on any conforming implementation:
 *   uniform():  (next_u64() >> 11) * 2^-53                 in [0, 1)
 *   normal():   Box-Muller on (1 - uniform(), uniform())
 *   below(n):   rejection sampling on the top multiple of n
 */
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

  // Unbiased integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace deskmri
