#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

namespace ckmerge {

// Streaming 64-bit FNV-1a. Not cryptographic; used to fingerprint checkpoint
// contents and to key per-tensor random streams.
class Fnv1a {
public:
    void update(const void * data, std::size_t len) {
        const auto * bytes = static_cast<const unsigned char *>(data);
        for (std::size_t i = 0; i < len; ++i) {
            hash_ ^= bytes[i];
            hash_ *= kPrime;
        }
    }

    uint64_t digest() const { return hash_; }

private:
    static constexpr uint64_t kOffsetBasis = 1469598103934665603ULL;
    static constexpr uint64_t kPrime       = 1099511628211ULL;
    uint64_t hash_ = kOffsetBasis;
};

inline uint64_t fnv1a64(std::string_view s) {
    Fnv1a h;
    h.update(s.data(), s.size());
    return h.digest();
}

std::string to_hex(uint64_t v);
uint64_t    from_hex(std::string_view s);

} // namespace ckmerge
