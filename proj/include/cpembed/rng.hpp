#pragma once

#include <cstdint>

namespace cpembed {

// xorshift64* seeded through one splitmix64 step (so seed 0 is usable).
// This is the only randomness source in the project; fixture weights and
// test generators all draw from it so that every implementation reproduces
// the same streams from the same seed.
class Xorshift64Star {
 public:
  explicit Xorshift64Star(std::uint64_t seed) : state_(splitmix64(seed)) {
    if (state_ == 0) state_ = 0x9E3779B97F4A7C15ull;
  }

  std::uint64_t next() {
    state_ ^= state_ >> 12;
    state_ ^= state_ << 25;
    state_ ^= state_ >> 27;
    return state_ * 0x2545F4914F6CDD1Dull;
  }

  // Uniform in [0, 1) with 53 bits of resolution.
  double uniform01() {
    return static_cast<double>(next() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Uniform integer in [0, n); n must be positive.
  std::uint64_t below(std::uint64_t n) { return next() % n; }

 private:
  static std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
  }

  std::uint64_t state_;
};

}  // namespace cpembed
