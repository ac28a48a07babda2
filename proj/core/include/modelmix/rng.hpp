#pragma once

#include <cstdint>
#include <random>

namespace modelmix {

/// Explicit, copyable random state. Every stochastic operation takes one of
/// these by reference; nothing in the library draws from global randomness.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed = 0) : engine_(mix(seed)) {}

  /// Uniform double in [0, 1) built from the top 53 bits of one draw.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_);
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }

  double gamma(double shape) { return std::gamma_distribution<double>(shape, 1.0)(engine_); }

  /// Independent child stream keyed by `stream`; advances this generator once.
  SeededRng fork(std::uint64_t stream) { return SeededRng(engine_() ^ mix(stream + 0x9e3779b97f4a7c15ULL)); }

  std::uint64_t next_u64() { return engine_(); }

  bool operator==(const SeededRng&) const = default;

 private:
  // splitmix64 finalizer
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::mt19937_64 engine_;
};

}  // namespace modelmix
