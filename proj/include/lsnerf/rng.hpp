#pragma once

// PCG32: small, fast, and identical on every platform, unlike the standard
// library distributions. All randomness in the project flows through this
// so seeded runs are byte-reproducible.

#include <cmath>
#include <cstdint>

namespace lsnerf {

class Pcg32 {
 public:
  Pcg32() : Pcg32(0x853c49e6748fea9bULL, 0xda3e39cb94b95bdbULL) {}
  explicit Pcg32(uint64_t seed, uint64_t seq = 1) { reseed(seed, seq); }

  void reseed(uint64_t seed, uint64_t seq = 1) {
    state_ = 0;
    inc_ = (seq << 1u) | 1u;
    next_u32();
    state_ += seed;
    next_u32();
  }

  uint32_t next_u32() {
    const uint64_t old = state_;
    state_ = old * 6364136223846793005ULL + inc_;
    const uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
    const uint32_t rot = static_cast<uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((-rot) & 31));
  }

  // Uniform in [0, 1).
  double next_double() { return next_u32() * (1.0 / 4294967296.0); }
  float next_float() { return static_cast<float>(next_u32() >> 8) * (1.0f / 16777216.0f); }

  // Uniform integer in [0, n).
  uint32_t next_below(uint32_t n) {
    // Lemire-style rejection to avoid modulo bias.
    uint64_t m = static_cast<uint64_t>(next_u32()) * n;
    uint32_t lo = static_cast<uint32_t>(m);
    if (lo < n) {
      const uint32_t t = (-n) % n;
      while (lo < t) {
        m = static_cast<uint64_t>(next_u32()) * n;
        lo = static_cast<uint32_t>(m);
      }
    }
    return static_cast<uint32_t>(m >> 32);
  }

  // Standard normal via Box-Muller.
  double next_normal() {
    double u1 = next_double();
    if (u1 < 1e-12) u1 = 1e-12;
    const double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  uint64_t state() const { return state_; }
  uint64_t inc() const { return inc_; }
  void set_state(uint64_t state, uint64_t inc) { state_ = state; inc_ = inc; }

 private:
  uint64_t state_ = 0;
  uint64_t inc_ = 0;
};

// Decorrelated per-pixel stream, used by renderers so results do not depend
// on pixel evaluation order.
inline Pcg32 pixel_rng(uint64_t seed, uint64_t frame, int row, int col) {
  const uint64_t key = seed * 0x9E3779B97F4A7C15ULL + frame * 0xBF58476D1CE4E5B9ULL +
                       (static_cast<uint64_t>(row) << 32) + static_cast<uint64_t>(col);
  return Pcg32(key, 0x94D049BB133111EBULL ^ frame);
}

}  // namespace lsnerf
