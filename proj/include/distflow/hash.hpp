// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

namespace distflow {

// SplitMix64 finalizer. All synthetic randomness in the simulator is derived
// from this, keyed by counters, so results never depend on scheduling,
// backend, or call order.
inline uint64_t splitmix64(uint64_t z) {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline uint64_t hash_combine(uint64_t seed, uint64_t v) {
  return splitmix64(seed ^ (v + 0x9E3779B97F4A7C15ull + (seed << 6) + (seed >> 2)));
}

inline uint64_t hash_str(uint64_t seed, std::string_view s) {
  uint64_t h = seed;
  for (char c : s) h = hash_combine(h, static_cast<uint8_t>(c));
  return h;
}

// hash of (seed, domain tag, counters...)
template <typename... Counters>
uint64_t keyed_hash(uint64_t seed, std::string_view domain, Counters... counters) {
  uint64_t h = hash_str(seed, domain);
  ((h = hash_combine(h, static_cast<uint64_t>(counters))), ...);
  return h;
}

// Map a 64-bit hash onto [0, 1). 53 bits of mantissa.
inline double unit_from_hash(uint64_t h) {
  return static_cast<double>(h >> 11) * (1.0 / 9007199254740992.0);
}

// Map onto [-1, 1).
inline double symmetric_from_hash(uint64_t h) { return 2.0 * unit_from_hash(h) - 1.0; }

// Deterministic byte stream of length n keyed by `key`.
inline std::vector<uint8_t> hash_bytes(uint64_t key, size_t n) {
  std::vector<uint8_t> out(n);
  size_t i = 0;
  uint64_t counter = 0;
  while (i < n) {
    uint64_t block = splitmix64(key + counter++);
    for (int b = 0; b < 8 && i < n; ++b, ++i) {
      out[i] = static_cast<uint8_t>(block >> (8 * b));
    }
  }
  return out;
}

}  // namespace distflow
