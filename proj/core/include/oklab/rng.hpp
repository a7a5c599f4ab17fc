#pragma once

#include <cstdint>

namespace oklab {

/** SplitMix64 finalizer: a well-mixed 64-bit hash of x. Used both as a
 *  keyed coordinate hash and as the engine behind the sequential generator,
 *  so every synthetic data source in the lab is platform-independent and
 *  reproducible from a single seed. */
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/** Order-sensitive combination of two 64-bit keys. */
constexpr std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
  return splitmix64(a ^ (0x9e3779b97f4a7c15ULL + b + (a << 6) + (a >> 2)));
}

/** Uniform double in [0, 1) from 64 random bits (53-bit resolution). */
constexpr double unit_from_bits(std::uint64_t bits) {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

/** Sequential deterministic generator (SplitMix64 stream). */
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /** Uniform in [0, 1). */
  double next_unit() { return unit_from_bits(next()); }

  /** Uniform in [-1, 1). */
  double next_pm1() { return 2.0 * next_unit() - 1.0; }

 private:
  std::uint64_t state_;
};

}  // namespace oklab
