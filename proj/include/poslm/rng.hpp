#pragma once

#include <cmath>
#include <cstdint>

namespace poslm {

// Counter-based pseudo-random generator (SplitMix64). The i-th output is a
// pure function of (seed, i), so streams are reproducible across platforms
// and independent of call history length. std::* distributions are avoided
// on purpose: their output is implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [0, n). n must be > 0.
  std::uint32_t next_below(std::uint32_t n) {
    return static_cast<std::uint32_t>(next_u64() % n);
  }

  bool next_bool(double p_true) { return next_double() < p_true; }

  // Box-Muller; one fresh draw per call keeps the stream position predictable.
  double next_gaussian() {
    double u1 = next_double();
    double u2 = next_double();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  // Deterministically derived child stream; used to give each pipeline stage
  // (scene i, epoch e, ...) its own independent sequence.
  Rng fork(std::uint64_t stream_id) const {
    Rng mix(state_ ^ (0x6a09e667f3bcc909ULL + stream_id * 0x3c6ef372fe94f82bULL));
    return Rng(mix.next_u64());
  }

 private:
  std::uint64_t state_;
};

inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream_id) {
  return Rng(root).fork(stream_id).next_u64();
}

}  // namespace poslm
