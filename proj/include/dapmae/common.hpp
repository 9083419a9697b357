// SPDX-License-Identifier: Apache-2.0
//
// dapmae - cross-domain masked-autoencoder pre-training on point clouds.
// Shared basics: deterministic RNG, seed derivation, error types.

#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace dapmae {

/// Error thrown when a binary file fails validation. Carries the byte
/// offset of the first inconsistent field.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

/// Error thrown when an operation is invoked on a component in the wrong
/// mode (e.g. fusion-mode adapter asked to run adaptation).
class StateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Error thrown for invalid or inconsistent configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Error thrown when training produces a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::int64_t step)
      : std::runtime_error(what + " (step " + std::to_string(step) + ")"),
        step_(step) {}
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// Mixes a tag into a seed; used to derive independent substream seeds
/// (per epoch, per cloud, per purpose) from one root seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t s = seed ^ (tag + 0x9e3779b97f4a7c15ull + (seed << 6) + (seed >> 2));
  return splitmix64(s);
}

/// Small deterministic generator (splitmix64 core). Self-contained so
/// streams are reproducible across standard libraries and platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64() { return splitmix64(state_); }

  /// Uniform double in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller. Draws two uniforms, returns one
  /// deviate; no cached state so the stream is a pure function of state_.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  /// Uniform integer in [0, n), unbiased (rejection sampling).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

  std::uint64_t state() const { return state_; }
  void set_state(std::uint64_t s) { state_ = s; }

 private:
  std::uint64_t state_;
};

}  // namespace dapmae
