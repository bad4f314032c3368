// Copyright 2026 The t2sd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace t2sd {

/// FNV-1a 64-bit over a byte string. Also the normative token hash of the
/// bag-of-words text embedder, so the constants are part of the wire contract.
inline uint64_t fnv1a64(std::string_view bytes,
                        uint64_t h = 14695981039346656037ull) {
  for (unsigned char c : bytes) {
    h ^= static_cast<uint64_t>(c);
    h *= 1099511628211ull;
  }
  return h;
}

/// Derives an independent stream seed from a base seed and a purpose tag, so
/// e.g. parameter init and batch shuffling never share a stream.
inline uint64_t derive_seed(uint64_t base, std::string_view tag) {
  uint64_t h = fnv1a64(tag);
  for (int i = 0; i < 8; ++i) {
    h ^= (base >> (8 * i)) & 0xffu;
    h *= 1099511628211ull;
  }
  return h;
}

/// Deterministic random stream. All sampling in the library goes through this
/// wrapper; two runs with the same seed produce identical draws.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  /// Uniform integer in [lo, hi] inclusive.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    return std::uniform_int_distribution<int64_t>(lo, hi)(engine_);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace t2sd
