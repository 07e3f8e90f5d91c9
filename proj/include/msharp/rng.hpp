// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>

#include "errors.hpp"
#include "numeric.hpp"

namespace msharp {

/// Identifies one reproducible draw sequence.
struct RngState {
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;

  bool operator==(const RngState&) const = default;
};

namespace streams {
// Trace m of a decode uses stream m.
inline constexpr std::uint64_t kDecoder = 1ull << 40;
inline constexpr std::uint64_t kFallback = kDecoder + 1;
inline constexpr std::uint64_t kSisControl = kDecoder + 2;
inline constexpr std::uint64_t kSisParticle = kDecoder + (1ull << 20);
inline constexpr std::uint64_t kSisResample = 1ull << 48;
}  // namespace streams

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Child seed for trial `index` of a run seeded with `seed`.
inline constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) noexcept {
  return splitmix64(splitmix64(seed) ^ (index * 0xd1b54a32d192ed03ull + 1));
}

/// mt19937_64 keyed by (seed, stream). The engine is fully specified by the
/// standard and uniform() is built from raw bits, so draws are identical on
/// every platform.
class Rng {
 public:
  explicit Rng(RngState state = {})
      : state_(state),
        engine_(splitmix64(state.seed) ^ splitmix64(state.stream ^ 0x5851f42d4c957f2dull)) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  const RngState& state() const noexcept { return state_; }

 private:
  RngState state_;
  std::mt19937_64 engine_;
};

/// Draws index i with probability exp(w_i - log_sum_exp(w)).
inline std::size_t sample_categorical(std::span<const double> log_weights, Rng& rng) {
  const double z = log_sum_exp(log_weights);
  if (z == kNegInf) throw NumericError("sample_categorical: no finite weight");
  const double u = rng.uniform();
  double cumulative = 0.0;
  std::size_t last_finite = 0;
  for (std::size_t i = 0; i < log_weights.size(); ++i) {
    if (log_weights[i] == kNegInf) continue;
    last_finite = i;
    cumulative += std::exp(log_weights[i] - z);
    if (u < cumulative) return i;
  }
  // Rounding left the cumulative sum just below u.
  return last_finite;
}

}  // namespace msharp
