#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace carel {

// Seedable generator with platform-independent derived distributions.
// std::uniform_real_distribution and friends are implementation-defined, so
// only the raw 64-bit engine output is used.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);

  // Standard normal via Box-Muller (no cached second value, so the stream is
  // a pure function of the engine state).
  double normal();

  // Index drawn from an unnormalized non-negative weight vector.
  template <typename Range>
  std::size_t categorical(const Range& weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    double u = uniform() * total;
    std::size_t i = 0;
    std::size_t last = 0;
    for (double w : weights) {
      if (w > 0.0) last = i;
      if (u < w) return i;
      u -= w;
      ++i;
    }
    return last;
  }

  // Derive an independent child seed (splitmix64 of the next engine output).
  std::uint64_t fork_seed();

  std::string state() const;
  void set_state(const std::string& state);

 private:
  std::mt19937_64 engine_;
};

// splitmix64 finalizer; used to derive per-purpose seeds from a base seed.
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t salt);

}  // namespace carel
