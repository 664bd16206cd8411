// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>

namespace cellprompt {

/// Seeded random source shared by every stochastic component.
///
/// The engine is std::mt19937_64 (the standard 64-bit Mersenne Twister,
/// default-seeded with a single 64-bit value). All derived draws are defined
/// here rather than through <random> distributions, whose output is
/// implementation-defined:
///   - uniform():   (next() >> 11) * 2^-53, a double in [0, 1)
///   - below(n):    rejection sampling; draw x, reject while
///                  x >= 2^64 - (2^64 mod n), return x mod n
///   - normal():    Box-Muller on u1 = 1 - uniform(), u2 = uniform(),
///                  returning sqrt(-2 ln u1) * cos(2 pi u2), one draw per call
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::uint64_t below(std::uint64_t n);
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  const std::mt19937_64& engine() const { return engine_; }

 private:
  std::mt19937_64 engine_;
};

/// Mixes several integers into one seed (splitmix64 finalizer chain) so that
/// derived streams such as (seed, epoch, sample) do not collide.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

}  // namespace cellprompt
