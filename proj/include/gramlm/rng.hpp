#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace gramlm {

// Counter-based generator: every draw is splitmix64(seed, counter), so the
// whole state is two integers and resuming from a checkpoint is exact.
struct RngState {
  std::uint64_t seed = 0;
  std::uint64_t counter = 0;

  std::uint64_t next_u64() {
    std::uint64_t z = seed + (++counter) * 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t r;
    do {
      r = next_u64();
    } while (r >= limit);
    return r % n;
  }

  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  bool operator==(const RngState&) const = default;
};

// Independent stream for (seed, stream index): per-shard and per-step seeds.
inline RngState derive_rng(std::uint64_t seed, std::uint64_t stream) {
  RngState mix{seed ^ 0xD1B54A32D192ED03ULL, stream};
  return RngState{mix.next_u64(), 0};
}

}  // namespace gramlm
