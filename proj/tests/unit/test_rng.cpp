// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>
#include <set>

#include "cellprompt/rng.hpp"
#include "doctest.h"

using cellprompt::derive_seed;
using cellprompt::Rng;

TEST_CASE("engine is the standard 64-bit Mersenne Twister") {
  Rng rng(5489);
  std::uint64_t v = 0;
  for (int i = 0; i < 10000; ++i) v = rng.next();
  CHECK(v == 9981545732273789042ULL);
}

TEST_CASE("derived draws follow their documented formulas") {
  Rng rng(77);
  std::mt19937_64 ref(77);
  for (int i = 0; i < 1000; ++i) {
    const double u = rng.uniform();
    CHECK(u == static_cast<double>(ref() >> 11) / 9007199254740992.0);
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  for (int i = 0; i < 100; ++i) {
    const double z = rng.normal();
    const double u1 = 1.0 - static_cast<double>(ref() >> 11) / 9007199254740992.0;
    const double u2 = static_cast<double>(ref() >> 11) / 9007199254740992.0;
    CHECK(z == std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2));
  }
}

TEST_CASE("below stays in range and hits every value") {
  Rng rng(3);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 2000; ++i) {
    const std::uint64_t v = rng.below(7);
    CHECK(v < 7);
    seen.insert(v);
  }
  CHECK(seen.size() == 7);
  CHECK(rng.below(1) == 0);
  CHECK(rng.below(0) == 0);
}

TEST_CASE("normal draws have unit moments") {
  Rng rng(9);
  double s = 0.0, s2 = 0.0;
  constexpr int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    s += z;
    s2 += z * z;
  }
  CHECK(std::abs(s / n) < 0.01);
  CHECK(std::abs(s2 / n - 1.0) < 0.02);
}

TEST_CASE("derive_seed matches a splitmix64 chain") {
  CHECK(derive_seed(0, 0, 0) == 2558736989570252433ULL);
  CHECK(derive_seed(7, 1, 2) == 1650069959653123811ULL);
  CHECK(derive_seed(42, 3) == 3233633249810115081ULL);
  CHECK(derive_seed(~0ULL, 5, 9) == 7274169014323890152ULL);
}

TEST_CASE("derived streams do not collide on a small grid") {
  std::set<std::uint64_t> seeds;
  for (std::uint64_t s = 0; s < 8; ++s)
    for (std::uint64_t a = 0; a < 32; ++a)
      for (std::uint64_t b = 0; b < 32; ++b) seeds.insert(derive_seed(s, a, b));
  CHECK(seeds.size() == 8u * 32u * 32u);
}
