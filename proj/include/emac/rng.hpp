#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace emac {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// FNV-1a; stable across platforms, unlike std::hash.
inline std::uint64_t stable_hash(std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Seed of the named substream derived from a run's master seed. Each
/// consumer (env resets, warmup actions, noise, projection, sampling, init,
/// evaluation, diagnostics) draws from its own stream so that switching one
/// feature on or off never shifts the numbers another one sees.
inline std::uint64_t substream_seed(std::uint64_t master, std::string_view name) {
  return splitmix64(splitmix64(master) ^ stable_hash(name));
}

inline Rng make_substream(std::uint64_t master, std::string_view name) {
  return Rng{substream_seed(master, name)};
}

}  // namespace emac
