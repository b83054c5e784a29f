#pragma once

#include <cstdint>
#include <random>

namespace n2p {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Deterministic generator. Distributions are computed here instead of via
/// <random> distributions so streams are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(splitmix64(seed)) {}

  /// Independent stream keyed by (seed, stream, counter); used so that each
  /// consumer (batching, sampling, mining, ...) can be replayed in isolation.
  static Rng stream(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter = 0) {
    return Rng(splitmix64(seed ^ splitmix64(stream * 0x632be59bd9b4e019ULL + splitmix64(counter))));
  }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n); n > 0. Lemire rejection keeps it unbiased.
  std::uint64_t below(std::uint64_t n) {
    for (;;) {
      const std::uint64_t x = engine_();
      const unsigned __int128 m = static_cast<unsigned __int128>(x) * n;
      const auto low = static_cast<std::uint64_t>(m);
      if (low >= n || low >= (-n) % n) return static_cast<std::uint64_t>(m >> 64);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace n2p
