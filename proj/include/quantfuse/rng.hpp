// rng.hpp - counter-based deterministic random numbers.
//
// Every draw is a pure function of (seed, stream, index), so weights,
// scenes and checkpoints reproduce bit-for-bit across runs and platforms.
// Normal deviates use an Irwin-Hall 12-sum, which involves only IEEE
// adds/multiplies and therefore has no libm dependence.

#pragma once

#include <cstdint>

namespace qf {

// splitmix64 finalizer.
inline constexpr uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// A keyed counter: distinct (seed, stream, index) triples give independent
// 64-bit words.
struct CounterRng {
  uint64_t seed = 0;
  uint64_t stream = 0;

  uint64_t word(uint64_t index) const {
    return mix64(mix64(seed ^ 0x243f6a8885a308d3ull) ^
                 mix64(stream * 0x9e3779b97f4a7c15ull + index));
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform(uint64_t index) const {
    return static_cast<double>(word(index) >> 11) * 0x1.0p-53;
  }

  // Uniform in [lo, hi).
  double uniform(uint64_t index, double lo, double hi) const {
    return lo + (hi - lo) * uniform(index);
  }

  // Approximately standard normal: sum of 12 uniforms minus 6
  // (Irwin-Hall). Exact IEEE arithmetic, platform independent.
  double normal(uint64_t index) const {
    double s = 0.0;
    for (uint64_t k = 0; k < 12; ++k) s += uniform(index * 12 + k);
    return s - 6.0;
  }
};

}  // namespace qf
