#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>

namespace ulip {

using Digest = std::array<std::uint8_t, 32>;

Digest sha256(std::span<const std::uint8_t> data);
std::string to_hex(const Digest& d);

}  // namespace ulip
