#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace fsfl {

using Rng = std::mt19937_64;

// splitmix64 finalizer
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Derives an independent stream seed from a base seed and a path of stream
/// identifiers, e.g. derive_seed(master, {kInitStream, device}).
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = mix64(base);
  for (auto p : path) s = mix64(s ^ mix64(p + 0x632be59bd9b4e019ULL));
  return s;
}

// Stream tags.
inline constexpr std::uint64_t kInitStream = 1;
inline constexpr std::uint64_t kShuffleStream = 2;
inline constexpr std::uint64_t kDistillStream = 3;
inline constexpr std::uint64_t kTopologyStream = 4;
inline constexpr std::uint64_t kDataStream = 5;
inline constexpr std::uint64_t kDropoutStream = 6;

}  // namespace fsfl
