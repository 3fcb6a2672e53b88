#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace deltapress {

// Code streams for 2/4/8-bit widths are packed LSB-first into bytes.
// 3-bit codes go ten to a little-endian 32-bit word (bits 0..29, two zero
// pad bits); a trailing partial word is still written as four bytes.
bool is_supported_bit_width(int bits);

std::size_t packed_size(std::size_t count, int bits);

std::vector<std::uint8_t> pack_codes(std::span<const std::uint32_t> codes,
                                     int bits);

std::vector<std::uint32_t> unpack_codes(std::span<const std::uint8_t> packed,
                                        int bits, std::size_t count);

// LEB128 unsigned varint.
void append_varint(std::vector<std::uint8_t>& out, std::uint64_t value);
std::size_t varint_size(std::uint64_t value);
// Reads a varint at `pos`, advancing it. Throws DataError on truncation.
std::uint64_t read_varint(std::span<const std::uint8_t> in, std::size_t& pos);

}  // namespace deltapress
