#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace emdiff {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Seed for a named sub-stream of `root`. Streams with different (tag, index)
/// pairs are statistically independent for practical purposes.
constexpr std::uint64_t derive_seed(std::uint64_t root, std::uint64_t tag,
                                    std::uint64_t index = 0) noexcept {
  return mix64(mix64(root ^ mix64(tag)) + index);
}

inline Rng make_rng(std::uint64_t root, std::uint64_t tag, std::uint64_t index = 0) {
  return Rng(derive_seed(root, tag, index));
}

inline void fill_normal(Rng& rng, std::span<float> out) {
  std::normal_distribution<double> n01(0.0, 1.0);
  for (auto& v : out) v = static_cast<float>(n01(rng));
}

// Stream tags. Values are arbitrary but frozen: changing one changes every
// seeded artifact downstream.
namespace stream {
inline constexpr std::uint64_t kInit = 0x11;
inline constexpr std::uint64_t kTrainShuffle = 0x21;
inline constexpr std::uint64_t kTrainNoise = 0x22;
inline constexpr std::uint64_t kTrainDropout = 0x23;
inline constexpr std::uint64_t kChain = 0x31;
inline constexpr std::uint64_t kLambdaChain = 0x32;
inline constexpr std::uint64_t kSubset = 0x41;
inline constexpr std::uint64_t kLambdaSubset = 0x42;
inline constexpr std::uint64_t kEval = 0x51;
inline constexpr std::uint64_t kData = 0x61;
inline constexpr std::uint64_t kMask = 0x62;
inline constexpr std::uint64_t kCorrupt = 0x63;
inline constexpr std::uint64_t kSwd = 0x71;
inline constexpr std::uint64_t kMStep = 0x81;
inline constexpr std::uint64_t kInitTrain = 0x82;
inline constexpr std::uint64_t kReset = 0x83;
}  // namespace stream

}  // namespace emdiff
