#pragma once

#include <cstdint>
#include <cmath>

namespace pialnn {

// SplitMix64 finalizer. All randomness in this project derives from it so
// that every output is a pure function of (seed, counter) and is therefore
// reproducible bit-for-bit across runs. See README "Reproducibility".
inline uint64_t mix64(uint64_t z) {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// Derives an independent stream key from a base seed and a purpose tag.
inline uint64_t subkey(uint64_t seed, uint64_t tag) {
  return mix64(seed ^ mix64(tag));
}

// Counter-based generator: value i of stream `key` is mix64(key + i*PHI),
// which is exactly the SplitMix64 sequence seeded with `key`.
class Rng {
 public:
  explicit Rng(uint64_t key) : state_(key) {}

  uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return (next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) { return next_u64() % n; }

  // Standard normal via Box-Muller; u1 is kept in (0, 1].
  double normal() {
    double u1 = ((next_u64() >> 11) + 1) * 0x1.0p-53;
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

 private:
  uint64_t state_;
};

}  // namespace pialnn
