#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace fedcog {

using Rng = std::mt19937_64;

// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a base seed and a tuple of tags
/// (client id, round, purpose, ...). Order of tags matters.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t h = mix64(base);
  for (std::uint64_t t : tags) h = mix64(h ^ mix64(t + 0x632BE59BD9B4E019ULL));
  return h;
}

// Stream purpose tags.
namespace stream {
inline constexpr std::uint64_t kModelInit = 1;
inline constexpr std::uint64_t kPartition = 2;
inline constexpr std::uint64_t kSampling = 3;
inline constexpr std::uint64_t kRealBatches = 4;
inline constexpr std::uint64_t kGenBatches = 5;
inline constexpr std::uint64_t kGenInit = 6;
inline constexpr std::uint64_t kSecAgg = 7;
inline constexpr std::uint64_t kPersonalSplit = 8;
inline constexpr std::uint64_t kSynthTrain = 9;
inline constexpr std::uint64_t kSynthTest = 10;
}  // namespace stream

}  // namespace fedcog
