#include <cmath>
#include <cstdint>
#include <limits>
#include <random>

#include <doctest.h>

#include "casp/half.hpp"

using namespace casp;

TEST_CASE("representable values round-trip exactly") {
  for (float v : {0.0f, 1.0f, -2.5f, 0.333251953125f, 65504.0f, -65504.0f, 6.103515625e-05f, 5.960464477539063e-08f}) {
    CHECK(half_to_float(float_to_half(v)) == v);
  }
}

TEST_CASE("known bit patterns") {
  CHECK(float_to_half(1.0f) == 0x3c00);
  CHECK(float_to_half(-2.0f) == 0xc000);
  CHECK(float_to_half(65504.0f) == 0x7bff);
  CHECK(float_to_half(5.960464477539063e-08f) == 0x0001);
  CHECK(half_to_float(0x7c00) == std::numeric_limits<float>::infinity());
  CHECK(std::isnan(half_to_float(0x7e00)));
}

TEST_CASE("round to nearest even at the halfway point") {
  // 1 + 2^-11 lies halfway between 1 and 1 + 2^-10.
  CHECK(half_to_float(float_to_half(1.0f + std::ldexp(1.0f, -11))) == 1.0f);
  // 1 + 3*2^-11 rounds up to the even neighbour 1 + 2^-9.
  CHECK(half_to_float(float_to_half(1.0f + 3.0f * std::ldexp(1.0f, -11))) == 1.0f + std::ldexp(1.0f, -9));
  CHECK(float_to_half(1e6f) == 0x7c00);
}

TEST_CASE("directed rounding brackets the input") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> dist(-100.0f, 100.0f);
  for (int i = 0; i < 2000; ++i) {
    const float v = i % 10 == 0 ? dist(rng) * 1e-6f : dist(rng);
    const float down = half_to_float(half_round_down(v));
    const float up = half_to_float(half_round_up(v));
    REQUIRE(down <= v);
    REQUIRE(up >= v);
    // Adjacent halves: nothing representable strictly between them.
    if (down != up) {
      const float mid = half_to_float(float_to_half(0.5f * (down + up)));
      CHECK((mid == down || mid == up));
    } else {
      CHECK(down == v);
    }
  }
}
