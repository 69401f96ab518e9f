#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>

#include "ckmerge/dtype.hpp"

using namespace ckmerge;

namespace {

uint32_t f32_bits(float v) {
    uint32_t b;
    std::memcpy(&b, &v, sizeof b);
    return b;
}

float bits_f32(uint32_t b) {
    float v;
    std::memcpy(&v, &b, sizeof v);
    return v;
}

bool is_nan_f16(uint16_t bits) {
    return (bits & 0x7C00) == 0x7C00 && (bits & 0x03FF) != 0;
}

bool is_nan_bf16(uint16_t bits) {
    return (bits & 0x7F80) == 0x7F80 && (bits & 0x007F) != 0;
}

} // namespace

TEST_CASE("f16 widen-narrow round-trips every bit pattern") {
    for (uint32_t bits = 0; bits <= 0xFFFF; ++bits) {
        const uint16_t h = uint16_t(bits);
        const float f = f16_to_f32(h);
        const uint16_t back = f32_to_f16(f);
        if (is_nan_f16(h)) {
            CHECK(std::isnan(f));
            CHECK(is_nan_f16(back));
        } else {
            CHECK(back == h);
        }
    }
}

TEST_CASE("bf16 widen-narrow round-trips every bit pattern") {
    for (uint32_t bits = 0; bits <= 0xFFFF; ++bits) {
        const uint16_t h = uint16_t(bits);
        const float f = bf16_to_f32(h);
        const uint16_t back = f32_to_bf16(f);
        if (is_nan_bf16(h)) {
            CHECK(std::isnan(f));
            CHECK(is_nan_bf16(back));
        } else {
            CHECK(back == h);
        }
    }
}

TEST_CASE("bf16 widening is the upper half of the f32 pattern") {
    CHECK(f32_bits(bf16_to_f32(0x3F80)) == 0x3F800000u);  // 1.0
    CHECK(f32_bits(bf16_to_f32(0xC000)) == 0xC0000000u);  // -2.0
    CHECK(f32_bits(bf16_to_f32(0x7F80)) == 0x7F800000u);  // +inf
    CHECK(f32_bits(bf16_to_f32(0x8000)) == 0x80000000u);  // -0.0
}

TEST_CASE("f16 widening of known values") {
    CHECK(f16_to_f32(0x3C00) == 1.0f);
    CHECK(f16_to_f32(0xBC00) == -1.0f);
    CHECK(f16_to_f32(0x7BFF) == 65504.0f);              // largest finite
    CHECK(f16_to_f32(0x0001) == 0x1.0p-24f);            // smallest subnormal
    CHECK(f16_to_f32(0x0400) == 0x1.0p-14f);            // smallest normal
    CHECK(f16_to_f32(0x7C00) == std::numeric_limits<float>::infinity());
    CHECK(f16_to_f32(0xFC00) == -std::numeric_limits<float>::infinity());
    CHECK(f32_bits(f16_to_f32(0x8000)) == 0x80000000u);  // -0.0 keeps its sign
}

TEST_CASE("f16 narrowing rounds to nearest even") {
    // 1.0 + 2^-11 sits exactly between 1.0 (0x3C00) and the next f16
    // (0x3C01); the even mantissa wins.
    CHECK(f32_to_f16(1.0f + 0x1.0p-11f) == 0x3C00);
    // One ulp above the midpoint rounds up.
    CHECK(f32_to_f16(std::nextafterf(1.0f + 0x1.0p-11f, 2.0f)) == 0x3C01);
    // Midpoint above an odd mantissa rounds up to even.
    const float one_ulp = f16_to_f32(0x3C01);
    CHECK(f32_to_f16(one_ulp + 0x1.0p-11f) == 0x3C02);
    // Mantissa carry into the exponent: the midpoint above the largest f16
    // below 2.0 has an odd mantissa, so the tie rounds up to exactly 2.0.
    CHECK(f32_to_f16(2.0f - 0x1.0p-11f) == 0x4000);
}

TEST_CASE("f16 narrowing saturates and underflows") {
    CHECK(f32_to_f16(65504.0f) == 0x7BFF);
    CHECK(f32_to_f16(65519.0f) == 0x7BFF);   // below the rounding boundary
    CHECK(f32_to_f16(65520.0f) == 0x7C00);   // at the boundary: infinity
    CHECK(f32_to_f16(1.0e6f) == 0x7C00);
    CHECK(f32_to_f16(-1.0e6f) == 0xFC00);
    CHECK(f32_to_f16(std::numeric_limits<float>::infinity()) == 0x7C00);
    // Half the smallest subnormal rounds to zero, keeping the sign.
    CHECK(f32_to_f16(0x1.0p-25f) == 0x0000);
    CHECK(f32_to_f16(-0x1.0p-25f) == 0x8000);
    // Just above it rounds to the smallest subnormal.
    CHECK(f32_to_f16(std::nextafterf(0x1.0p-25f, 1.0f)) == 0x0001);
    CHECK(f32_to_f16(0x1.8p-25f) == 0x0001);
}

TEST_CASE("bf16 narrowing rounds to nearest even") {
    CHECK(f32_to_bf16(1.0f) == 0x3F80);
    // Exactly halfway between 0x3F80 and 0x3F81: even mantissa wins.
    CHECK(f32_to_bf16(bits_f32(0x3F808000u)) == 0x3F80);
    CHECK(f32_to_bf16(bits_f32(0x3F808001u)) == 0x3F81);
    // Halfway above an odd mantissa rounds up.
    CHECK(f32_to_bf16(bits_f32(0x3F818000u)) == 0x3F82);
    CHECK(f32_to_bf16(std::numeric_limits<float>::infinity()) == 0x7F80);
    CHECK(f32_to_bf16(-0.0f) == 0x8000);
}

TEST_CASE("nan narrows to nan") {
    CHECK(is_nan_f16(f32_to_f16(std::numeric_limits<float>::quiet_NaN())));
    CHECK(is_nan_bf16(f32_to_bf16(std::numeric_limits<float>::quiet_NaN())));
    // Sign is preserved even for NaN.
    CHECK((f32_to_f16(bits_f32(0xFFC00000u)) & 0x8000) == 0x8000);
}

TEST_CASE("dtype names and sizes") {
    CHECK(dtype_size(Dtype::F32) == 4);
    CHECK(dtype_size(Dtype::F16) == 2);
    CHECK(dtype_size(Dtype::BF16) == 2);
    CHECK(dtype_name(Dtype::F32) == "F32");
    CHECK(dtype_name(Dtype::F16) == "F16");
    CHECK(dtype_name(Dtype::BF16) == "BF16");
    CHECK(dtype_from_name("F32") == Dtype::F32);
    CHECK(dtype_from_name("F16") == Dtype::F16);
    CHECK(dtype_from_name("BF16") == Dtype::BF16);
    CHECK(!dtype_from_name("F64"));
    CHECK(!dtype_from_name("f32"));
}

TEST_CASE("buffer conversions are elementwise and little-endian") {
    const std::vector<float> values = {1.0f, -2.0f, 0.0f, 0.5f};
    for (Dtype d : {Dtype::F32, Dtype::F16, Dtype::BF16}) {
        auto raw = from_f32(values, d);
        CHECK(raw.size() == values.size() * dtype_size(d));
        auto back = to_f32(raw, d);
        REQUIRE(back.size() == values.size());
        for (std::size_t i = 0; i < values.size(); ++i) CHECK(back[i] == values[i]);
    }
    // F16 of 1.0 is 00 3C little-endian.
    auto raw = from_f32(std::vector<float>{1.0f}, Dtype::F16);
    CHECK(uint8_t(raw[0]) == 0x00);
    CHECK(uint8_t(raw[1]) == 0x3C);
}

TEST_CASE("narrowing a widened value is identity on buffers") {
    // Every F16 magnitude that survives widening narrows back to itself, so
    // storage round-trips do not drift.
    std::vector<float> values;
    for (uint32_t bits = 0; bits <= 0xFFFF; ++bits) {
        if (is_nan_f16(uint16_t(bits))) continue;
        values.push_back(f16_to_f32(uint16_t(bits)));
    }
    auto raw = from_f32(values, Dtype::F16);
    auto back = to_f32(raw, Dtype::F16);
    for (std::size_t i = 0; i < values.size(); ++i) CHECK(back[i] == values[i]);
}
