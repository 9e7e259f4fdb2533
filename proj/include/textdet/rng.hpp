#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace textdet {

// Deterministic 64-bit RNG (splitmix64) with explicit float mappings so that
// streams are reproducible independent of the standard library's
// distribution implementations. Every consumer derives its own stream via
// Rng(seed) or Rng::child(), so parallel users never share state.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Derive an independent stream; deterministic in (parent state, salt).
  Rng child(uint64_t salt) {
    Rng tmp(state_ ^ (salt * 0x9e3779b97f4a7c15ULL + 0x2545f4914f6cdd1dULL));
    tmp.next_u64();
    return tmp;
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  int uniform_int(int n) { return n <= 1 ? 0 : static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }

  // Inclusive integer range.
  int uniform_range(int lo, int hi) { return lo + uniform_int(hi - lo + 1); }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller; consumes two uniforms per call so the stream layout is fixed.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  uint64_t state_;
};

}  // namespace textdet
