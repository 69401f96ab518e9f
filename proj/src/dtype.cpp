#include "ckmerge/dtype.hpp"

#include <bit>
#include <cstring>

#include "ckmerge/errors.hpp"

namespace ckmerge {

std::size_t dtype_size(Dtype d) {
    switch (d) {
        case Dtype::F32:  return 4;
        case Dtype::F16:  return 2;
        case Dtype::BF16: return 2;
    }
    return 0;
}

std::string_view dtype_name(Dtype d) {
    switch (d) {
        case Dtype::F32:  return "F32";
        case Dtype::F16:  return "F16";
        case Dtype::BF16: return "BF16";
    }
    return "?";
}

std::optional<Dtype> dtype_from_name(std::string_view s) {
    if (s == "F32")  return Dtype::F32;
    if (s == "F16")  return Dtype::F16;
    if (s == "BF16") return Dtype::BF16;
    return std::nullopt;
}

float f16_to_f32(uint16_t bits) {
    const uint32_t sign = static_cast<uint32_t>(bits & 0x8000u) << 16;
    const uint32_t exp  = (bits >> 10) & 0x1Fu;
    uint32_t       mant = bits & 0x3FFu;

    uint32_t out;
    if (exp == 0) {
        if (mant == 0) {
            out = sign; // ±0
        } else {
            // Subnormal: 0.mant * 2^-14. Normalizing by s shifts puts the
            // leading one at bit 10, leaving value = 1.rest * 2^(-14 - s).
            int shift = 0;
            while ((mant & 0x400u) == 0) {
                mant <<= 1;
                ++shift;
            }
            mant &= 0x3FFu;
            const uint32_t e32 = 127 - 14 - static_cast<uint32_t>(shift);
            out = sign | (e32 << 23) | (mant << 13);
        }
    } else if (exp == 0x1F) {
        out = sign | 0x7F800000u | (mant << 13); // inf / NaN (payload kept)
    } else {
        out = sign | ((exp + 127 - 15) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(out);
}

float bf16_to_f32(uint16_t bits) {
    return std::bit_cast<float>(static_cast<uint32_t>(bits) << 16);
}

uint16_t f32_to_f16(float v) {
    const uint32_t bits = std::bit_cast<uint32_t>(v);
    const uint16_t sign = static_cast<uint16_t>((bits >> 16) & 0x8000u);
    const uint32_t exp  = (bits >> 23) & 0xFFu;
    const uint32_t mant = bits & 0x7FFFFFu;

    if (exp == 0xFF) {
        if (mant != 0) {
            return static_cast<uint16_t>(sign | 0x7E00u); // quiet NaN
        }
        return static_cast<uint16_t>(sign | 0x7C00u); // inf
    }

    // Unbiased exponent of the F32 value.
    const int e = static_cast<int>(exp) - 127;

    if (e > 15) {
        // >= 2^16, beyond the 65520 round-to-inf boundary.
        return static_cast<uint16_t>(sign | 0x7C00u);
    }

    if (e >= -14) {
        // Normal range. 13 mantissa bits are dropped; round to nearest even.
        uint32_t m   = mant;
        uint32_t out = static_cast<uint32_t>((e + 15) << 10) | (m >> 13);
        const uint32_t rest = m & 0x1FFFu;
        if (rest > 0x1000u || (rest == 0x1000u && (out & 1u))) {
            ++out; // may carry into the exponent; 65520+ becomes inf correctly
        }
        return static_cast<uint16_t>(sign | out);
    }

    // Subnormal or underflow to zero. Value magnitude is (1.mant) * 2^e with
    // e < -14; shift the implicit-one mantissa right until exponent is -14.
    if (e < -25) {
        return sign; // rounds to ±0 (below half of the smallest subnormal)
    }
    uint32_t m     = mant | 0x800000u;     // implicit one, 24 bits total
    const int drop = 13 + (-14 - e);       // bits shifted out (14..24)
    uint32_t out   = m >> drop;
    const uint32_t rest     = m & ((1u << drop) - 1);
    const uint32_t half     = 1u << (drop - 1);
    if (rest > half || (rest == half && (out & 1u))) {
        ++out;
    }
    return static_cast<uint16_t>(sign | out);
}

uint16_t f32_to_bf16(float v) {
    const uint32_t bits = std::bit_cast<uint32_t>(v);
    if ((bits & 0x7F800000u) == 0x7F800000u && (bits & 0x7FFFFFu) != 0) {
        // NaN: truncate but force the mantissa nonzero so it stays NaN.
        return static_cast<uint16_t>((bits >> 16) | 0x0040u);
    }
    const uint32_t rounding = 0x7FFFu + ((bits >> 16) & 1u);
    return static_cast<uint16_t>((bits + rounding) >> 16);
}

namespace {

uint16_t load_le16(const std::byte * p) {
    return static_cast<uint16_t>(static_cast<uint8_t>(p[0])) |
           static_cast<uint16_t>(static_cast<uint8_t>(p[1])) << 8;
}

} // namespace

void to_f32_into(std::span<const std::byte> raw, Dtype d, std::span<float> out) {
    const std::size_t esz = dtype_size(d);
    if (raw.size() % esz != 0) {
        throw ValidationError("buffer length is not a multiple of the element size");
    }
    const std::size_t n = raw.size() / esz;
    if (out.size() != n) {
        throw ValidationError("output buffer length mismatch in to_f32");
    }
    switch (d) {
        case Dtype::F32:
            std::memcpy(out.data(), raw.data(), raw.size());
            break;
        case Dtype::F16:
            for (std::size_t i = 0; i < n; ++i) {
                out[i] = f16_to_f32(load_le16(raw.data() + 2 * i));
            }
            break;
        case Dtype::BF16:
            for (std::size_t i = 0; i < n; ++i) {
                out[i] = bf16_to_f32(load_le16(raw.data() + 2 * i));
            }
            break;
    }
}

std::vector<float> to_f32(std::span<const std::byte> raw, Dtype d) {
    const std::size_t esz = dtype_size(d);
    if (raw.size() % esz != 0) {
        throw ValidationError("buffer length is not a multiple of the element size");
    }
    std::vector<float> out(raw.size() / esz);
    to_f32_into(raw, d, out);
    return out;
}

std::vector<std::byte> from_f32(std::span<const float> values, Dtype d) {
    std::vector<std::byte> out(values.size() * dtype_size(d));
    switch (d) {
        case Dtype::F32:
            std::memcpy(out.data(), values.data(), out.size());
            break;
        case Dtype::F16:
            for (std::size_t i = 0; i < values.size(); ++i) {
                const uint16_t b = f32_to_f16(values[i]);
                out[2 * i]     = static_cast<std::byte>(b & 0xFF);
                out[2 * i + 1] = static_cast<std::byte>(b >> 8);
            }
            break;
        case Dtype::BF16:
            for (std::size_t i = 0; i < values.size(); ++i) {
                const uint16_t b = f32_to_bf16(values[i]);
                out[2 * i]     = static_cast<std::byte>(b & 0xFF);
                out[2 * i + 1] = static_cast<std::byte>(b >> 8);
            }
            break;
    }
    return out;
}

} // namespace ckmerge
