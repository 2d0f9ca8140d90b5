#pragma once

#include <array>
#include <cstdint>
#include <string_view>
#include <vector>

namespace dvps {

/// Deterministic pseudo random stream. Every source of randomness in the
/// pipeline is an Rng derived from one root seed plus a stream name, so that
/// adding a consumer never perturbs the draws seen by existing ones.
///
/// The generator is xoshiro256** seeded through splitmix64; normal variates
/// use Box-Muller. No std::*_distribution is involved, which keeps the byte
/// stream identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  /// Child stream: seed mixed with an FNV-1a hash of `name`.
  Rng stream(std::string_view name) const;
  /// Child stream indexed by an integer (per video, per frame, ...).
  Rng stream(std::string_view name, std::uint64_t index) const;

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  /// Uniform in [lo, hi).
  double uniform(double lo, double hi);
  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t uniform_index(std::uint64_t n);
  /// Standard normal.
  double normal();
  double normal(double mean, double stddev);
  /// Fisher-Yates shuffle of 0..n-1.
  std::vector<int> permutation(int n);

  /// Full generator state, for training checkpoints.
  std::array<std::uint64_t, 7> serialize() const;
  void deserialize(const std::array<std::uint64_t, 7>& words);

 private:
  std::uint64_t state_[4];
  std::uint64_t root_seed_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace dvps
