#include "ckmerge/digest.hpp"

#include "ckmerge/errors.hpp"

namespace ckmerge {

std::string to_hex(uint64_t v) {
    static const char digits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xF];
        v >>= 4;
    }
    return out;
}

uint64_t from_hex(std::string_view s) {
    if (s.empty() || s.size() > 16) {
        throw ValidationError("bad hex digest: '" + std::string(s) + "'");
    }
    uint64_t v = 0;
    for (char c : s) {
        v <<= 4;
        if (c >= '0' && c <= '9') {
            v |= static_cast<uint64_t>(c - '0');
        } else if (c >= 'a' && c <= 'f') {
            v |= static_cast<uint64_t>(c - 'a' + 10);
        } else if (c >= 'A' && c <= 'F') {
            v |= static_cast<uint64_t>(c - 'A' + 10);
        } else {
            throw ValidationError("bad hex digest: '" + std::string(s) + "'");
        }
    }
    return v;
}

} // namespace ckmerge
