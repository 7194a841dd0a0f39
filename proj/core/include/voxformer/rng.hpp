// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>

namespace voxformer {

/// Seeded random stream. Distributions are derived here from raw 64-bit
/// draws so generated bytes do not depend on the standard library's
/// distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed), base_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform on [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  /// Normal(0, stddev) rejected outside [-2 stddev, 2 stddev].
  double truncated_normal(double stddev);

  /// Independent child stream keyed by `stream`; the parent is unaffected.
  [[nodiscard]] Rng fork(std::uint64_t stream) const;

  [[nodiscard]] std::uint64_t seed_material() const { return base_; }

 private:
  Rng(std::uint64_t seed, std::uint64_t base) : engine_(seed), base_(base) {}

  std::mt19937_64 engine_;
  std::uint64_t base_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// SplitMix64 finalizer; used to derive well-separated seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0);

}  // namespace voxformer
