#pragma once

#include <cstdint>
#include <string_view>

#include "ckmerge/digest.hpp"

namespace ckmerge {

// SplitMix64 (Steele/Lea/Flood via Vigna's reference implementation).
// The sequential generator seeded with s emits mix(s + GAMMA),
// mix(s + 2*GAMMA), ... — so the i-th draw (0-based) is directly addressable
// without walking the stream. That random access is what lets any parallel
// fill order produce identical values.
inline constexpr uint64_t kSplitMix64Gamma = 0x9E3779B97F4A7C15ULL;

inline constexpr uint64_t splitmix64_mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1E3565B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// One tensor's value stream. Seeded per (run seed, tensor name) so distinct
// tensors draw from unrelated streams and lookups are order-independent.
struct KeyedStream {
    uint64_t stream_seed = 0;

    static KeyedStream for_tensor(uint64_t seed, std::string_view tensor_name) {
        return KeyedStream{seed ^ fnv1a64(tensor_name)};
    }

    // i-th draw of the SplitMix64 sequence seeded with stream_seed.
    uint64_t at(uint64_t index) const {
        return splitmix64_mix(stream_seed + (index + 1) * kSplitMix64Gamma);
    }
};

// [0,1) with 53 random bits.
inline double u01(uint64_t bits) {
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

// Uniform float in [-1, 1).
inline float uniform_pm1(uint64_t bits) {
    return static_cast<float>(2.0 * u01(bits) - 1.0);
}

} // namespace ckmerge
