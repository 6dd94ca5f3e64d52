#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string_view>

namespace tal {

/// splitmix64 finalizer; used to derive independent sub-stream seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag);

/// FNV-1a over the bytes of `name`.
std::uint64_t hash_name(std::string_view name);

/// Seeded generator with platform-independent draws. The std distributions
/// are implementation-defined, so every draw here is derived from raw
/// mt19937_64 output.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  /// Independent stream for (seed, tag).
  static Rng stream(std::uint64_t seed, std::uint64_t tag) { return Rng(mix_seed(seed, tag)); }
  static Rng stream(std::uint64_t seed, std::string_view tag) { return stream(seed, hash_name(tag)); }

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n), unbiased.
  std::size_t below(std::size_t n);
  /// Uniform integer in [lo, hi] inclusive.
  std::int64_t between(std::int64_t lo, std::int64_t hi);
  /// Standard normal via Box-Muller.
  double normal();

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

} // namespace tal
