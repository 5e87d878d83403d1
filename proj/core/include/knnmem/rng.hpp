#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace knnmem {

/// Seeded random source with platform-independent sampling.
///
/// std::uniform_*_distribution and std::shuffle are implementation-defined,
/// so bounded integers, reals and shuffles are derived here directly from the
/// raw mt19937_64 stream. Identical seeds give identical draws everywhere.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  /// Independent stream for a named consumer, e.g. one per parameter tensor.
  static Rng derive(std::uint64_t seed, std::string_view stream);

  std::uint64_t next() { return engine_(); }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_index(std::uint64_t n);

  /// Uniform real in [lo, hi).
  double uniform(double lo, double hi);

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = uniform_index(i);
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

/// 64-bit FNV-1a, used for stream derivation and content fingerprints.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t state = 0xcbf29ce484222325ULL);

}  // namespace knnmem
