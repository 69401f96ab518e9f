#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace ckmerge {

enum class Dtype : uint8_t { F32, F16, BF16 };

std::size_t          dtype_size(Dtype d);
std::string_view     dtype_name(Dtype d);
std::optional<Dtype> dtype_from_name(std::string_view s);

// Exact widening. Specials (±inf, NaN) map to their F32 counterparts.
float f16_to_f32(uint16_t bits);
float bf16_to_f32(uint16_t bits);

// Round-to-nearest-even narrowing. Finite values that originated in the
// narrow type recover their original bits (widen/narrow is lossless).
uint16_t f32_to_f16(float v);
uint16_t f32_to_bf16(float v);

// Whole-buffer conversions between raw little-endian storage and F32 values.
// Raw buffer length must be a multiple of the element size.
std::vector<float> to_f32(std::span<const std::byte> raw, Dtype d);
void               to_f32_into(std::span<const std::byte> raw, Dtype d, std::span<float> out);
std::vector<std::byte> from_f32(std::span<const float> values, Dtype d);

} // namespace ckmerge
