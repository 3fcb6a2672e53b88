#include "deltapress/bitpack.hpp"

#include <string>

#include "deltapress/error.hpp"

namespace deltapress {

bool is_supported_bit_width(int bits) {
  return bits == 2 || bits == 3 || bits == 4 || bits == 8;
}

std::size_t packed_size(std::size_t count, int bits) {
  if (bits == 3) return 4 * ((count + 9) / 10);
  return (count * static_cast<std::size_t>(bits) + 7) / 8;
}

std::vector<std::uint8_t> pack_codes(std::span<const std::uint32_t> codes, int bits) {
  if (!is_supported_bit_width(bits)) {
    throw ConfigError("unsupported bit width " + std::to_string(bits));
  }
  const std::uint32_t limit = 1u << bits;
  std::vector<std::uint8_t> out(packed_size(codes.size(), bits), 0);
  if (bits == 3) {
    for (std::size_t w = 0; w * 10 < codes.size(); ++w) {
      std::uint32_t word = 0;
      for (std::size_t t = 0; t < 10 && w * 10 + t < codes.size(); ++t) {
        const auto c = codes[w * 10 + t];
        if (c >= limit) throw ConfigError("code exceeds 3 bits");
        word |= c << (3 * t);
      }
      for (int b = 0; b < 4; ++b) out[4 * w + b] = static_cast<std::uint8_t>(word >> (8 * b));
    }
    return out;
  }
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (codes[i] >= limit) throw ConfigError("code exceeds " + std::to_string(bits) + " bits");
    const std::size_t bit = i * static_cast<std::size_t>(bits);
    out[bit / 8] |= static_cast<std::uint8_t>(codes[i] << (bit % 8));
  }
  return out;
}

std::vector<std::uint32_t> unpack_codes(std::span<const std::uint8_t> packed,
                                        int bits, std::size_t count) {
  if (!is_supported_bit_width(bits)) {
    throw ConfigError("unsupported bit width " + std::to_string(bits));
  }
  if (packed.size() < packed_size(count, bits)) {
    throw DataError("packed code stream truncated");
  }
  std::vector<std::uint32_t> out(count);
  if (bits == 3) {
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t w = i / 10;
      std::uint32_t word = 0;
      for (int b = 3; b >= 0; --b) word = (word << 8) | packed[4 * w + b];
      out[i] = (word >> (3 * (i % 10))) & 0x7u;
    }
    return out;
  }
  const std::uint32_t mask = (1u << bits) - 1;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t bit = i * static_cast<std::size_t>(bits);
    out[i] = (static_cast<std::uint32_t>(packed[bit / 8]) >> (bit % 8)) & mask;
  }
  return out;
}

void append_varint(std::vector<std::uint8_t>& out, std::uint64_t value) {
  while (value >= 0x80) {
    out.push_back(static_cast<std::uint8_t>(value | 0x80));
    value >>= 7;
  }
  out.push_back(static_cast<std::uint8_t>(value));
}

std::size_t varint_size(std::uint64_t value) {
  std::size_t n = 1;
  while (value >= 0x80) {
    value >>= 7;
    ++n;
  }
  return n;
}

std::uint64_t read_varint(std::span<const std::uint8_t> in, std::size_t& pos) {
  std::uint64_t value = 0;
  for (int shift = 0; shift < 64; shift += 7) {
    if (pos >= in.size()) throw DataError("varint truncated at offset " + std::to_string(pos));
    const std::uint8_t byte = in[pos++];
    value |= static_cast<std::uint64_t>(byte & 0x7f) << shift;
    if ((byte & 0x80) == 0) return value;
  }
  throw DataError("varint too long at offset " + std::to_string(pos));
}

}  // namespace deltapress
