#pragma once

#include <cstdint>
#include <string_view>

namespace wdfq {

// SplitMix64 finalizer. Bijective on 64-bit words, good avalanche.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x00000100000001B3ull;
  }
  return h;
}

// Counter-based deterministic generator. Draw i is a pure function of
// (seed, name, i), so parameter initialization does not depend on the order
// in which modules register their tensors.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::string_view name)
      : key_(mix64(seed ^ fnv1a64(name))) {}

  std::uint64_t bits(std::int64_t i) const {
    return mix64(key_ ^ mix64(static_cast<std::uint64_t>(i) + 1));
  }

  // Uniform in [0, 1) with 53 random mantissa bits.
  double uniform(std::int64_t i) const {
    return static_cast<double>(bits(i) >> 11) * 0x1.0p-53;
  }

  // Uniform in (-bound, bound).
  double uniform_signed(std::int64_t i, double bound) const {
    return bound * (2.0 * uniform(i) - 1.0);
  }

 private:
  std::uint64_t key_;
};

}  // namespace wdfq
