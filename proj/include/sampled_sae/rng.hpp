#pragma once

#include <cstdint>
#include <random>

namespace sampled_sae {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Independent generator for (seed, stream, index). Every random draw in the
/// project goes through one of these so results never depend on call order
/// across streams or on the number of threads.
inline Rng stream_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
    std::uint64_t s = splitmix64(seed);
    s = splitmix64(s ^ (stream * 0xD1B54A32D192ED03ULL));
    s = splitmix64(s ^ index);
    return Rng(s);
}

/// Uniform double in [0, 1) from the top 53 bits.
inline double uniform01(Rng& rng) noexcept {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Stream identifiers.
namespace streams {
inline constexpr std::uint64_t kDictionary = 1;
inline constexpr std::uint64_t kBuckets = 2;
inline constexpr std::uint64_t kCodes = 3;
inline constexpr std::uint64_t kNoise = 4;
inline constexpr std::uint64_t kInitDecoder = 10;
inline constexpr std::uint64_t kInitBatch = 11;
inline constexpr std::uint64_t kBatch = 12;
inline constexpr std::uint64_t kUniformScores = 13;
}  // namespace streams

}  // namespace sampled_sae
