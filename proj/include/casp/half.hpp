#pragma once

#include <cstdint>

namespace casp {

// IEEE 754 binary16 storage helpers. Per-group quantizer parameters and
// codebook entries are kept at this precision.

std::uint16_t float_to_half(float value);
float half_to_float(std::uint16_t bits);

/// Largest half-precision value that is <= value.
std::uint16_t half_round_down(float value);
/// Smallest half-precision value that is >= value.
std::uint16_t half_round_up(float value);

}  // namespace casp
