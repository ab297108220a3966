// half.hpp - IEEE binary16 emulation on float storage.
//
// Values tagged EmulatedHalf are ordinary floats whose bit patterns are
// exact binary16 images. Conversion rounds to nearest, ties to even.

#pragma once

#include <bit>
#include <cstdint>

namespace qf {

inline constexpr float kHalfMax = 65504.0f;

// float -> binary16 bits, round-to-nearest-even. Caller must have clamped
// the magnitude to kHalfMax; infinities/NaN never reach this routine.
inline uint16_t f32_to_f16_rne(float value) {
  const uint32_t bits = std::bit_cast<uint32_t>(value);
  const uint32_t sign = (bits >> 16) & 0x8000u;
  const int32_t exp = static_cast<int32_t>((bits >> 23) & 0xffu);
  uint32_t mant = bits & 0x7fffffu;

  const int32_t half_exp = exp - 127 + 15;
  if (half_exp >= 31) {
    return static_cast<uint16_t>(sign | 0x7bffu);  // clamp guard, == 65504
  }
  if (half_exp <= 0) {
    // Subnormal half or zero.
    if (half_exp < -10) return static_cast<uint16_t>(sign);
    mant |= 0x800000u;
    const int shift = 14 - half_exp;  // 14..24
    uint32_t h = mant >> shift;
    const uint32_t rem = mant & ((1u << shift) - 1u);
    const uint32_t halfway = 1u << (shift - 1);
    if (rem > halfway || (rem == halfway && (h & 1u))) ++h;
    return static_cast<uint16_t>(sign | h);  // carry into exponent is valid
  }
  uint32_t h = sign | (static_cast<uint32_t>(half_exp) << 10) | (mant >> 13);
  const uint32_t rem = mant & 0x1fffu;
  if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) ++h;
  return static_cast<uint16_t>(h);
}

inline float f16_to_f32(uint16_t h) {
  const uint32_t sign = static_cast<uint32_t>(h & 0x8000u) << 16;
  const uint32_t exp = (h >> 10) & 0x1fu;
  const uint32_t mant = h & 0x3ffu;
  uint32_t out;
  if (exp == 0) {
    if (mant == 0) {
      out = sign;
    } else {
      // Normalize the subnormal.
      int e = 0;
      uint32_t m = mant;
      while ((m & 0x400u) == 0) {
        m <<= 1;
        ++e;
      }
      out = sign | static_cast<uint32_t>(113 - e) << 23 | ((m & 0x3ffu) << 13);
    }
  } else if (exp == 31) {
    out = sign | 0x7f800000u | (mant << 13);  // inf/NaN (not produced here)
  } else {
    out = sign | ((exp + 112u) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(out);
}

// Round a finite float through binary16 and back. |x| > 65504 saturates;
// the caller is responsible for counting saturations.
inline float round_to_half(float x, bool* saturated = nullptr) {
  if (x > kHalfMax) {
    if (saturated) *saturated = true;
    return kHalfMax;
  }
  if (x < -kHalfMax) {
    if (saturated) *saturated = true;
    return -kHalfMax;
  }
  return f16_to_f32(f32_to_f16_rne(x));
}

}  // namespace qf
