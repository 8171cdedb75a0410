#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace crtnet {

/// Deterministic random stream backed by std::mt19937_64.
///
/// mt19937_64 is fully specified by the C++ standard, but the library
/// distributions are not, so every derived quantity (uniform doubles,
/// integers, normals) is computed here from raw 64-bit draws. Equal seeds and
/// equal call sequences therefore give bit-identical streams on any platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed), seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, n). n must be positive.
  std::uint64_t uniform_int(std::uint64_t n);

  /// Integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(uniform_int(static_cast<std::uint64_t>(hi - lo) + 1));
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller (no cached second value).
  double normal();

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_;
};

/// SplitMix64 finalizer; used to derive independent sub-seeds.
std::uint64_t mix64(std::uint64_t x);

/// Order-sensitive hash of a seed path, e.g. derive_seed({master, split, index}).
std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts);

}  // namespace crtnet
