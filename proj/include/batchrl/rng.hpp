#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace batchrl {

// Seeded random stream. All randomness in the library flows through one of
// these; every draw is a pure function of the seed and the draw sequence,
// which is what makes runs byte-reproducible.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform01() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n) {
    // Rejection sampling keeps the distribution exact for any n.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform01();
  }

  // Unit-rate exponential.
  double exponential() {
    return -std::log1p(-uniform01());
  }

  bool bernoulli(double p) { return uniform01() < p; }

  // Derives an independent stream; used to give each seed/run its own rng.
  Rng split(std::uint64_t stream) const {
    std::uint64_t z = seed_mix_ + 0x9e3779b97f4a7c15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    z ^= z >> 31;
    return Rng(z, z);
  }

  explicit Rng(std::uint64_t seed, std::uint64_t mix)
      : engine_(seed), seed_mix_(mix) {}

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_mix_ = 0;
};

inline Rng make_rng(std::uint64_t seed) { return Rng(seed, seed); }

}  // namespace batchrl
