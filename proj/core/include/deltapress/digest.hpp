#pragma once

#include <cstdint>
#include <span>
#include <string>

namespace deltapress {

// Lowercase hex SHA-256 of a byte range.
std::string sha256_hex(std::span<const std::uint8_t> bytes);

}  // namespace deltapress
