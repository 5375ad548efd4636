#pragma once

#include <zlib.h>

#include <cstdint>
#include <span>

namespace entrodrop {

/// CRC-32 (IEEE 802.3 polynomial, as used by zip/png).
inline std::uint32_t crc32(std::span<const std::byte> bytes, std::uint32_t running = 0) {
  uLong crc = running;
  const auto* data = reinterpret_cast<const Bytef*>(bytes.data());
  std::size_t remaining = bytes.size();
  while (remaining > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(remaining, 1u << 30));
    crc = ::crc32(crc, data, chunk);
    data += chunk;
    remaining -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

template <typename T>
std::uint32_t crc32_of(std::span<const T> values, std::uint32_t running = 0) {
  return crc32(std::as_bytes(values), running);
}

}  // namespace entrodrop
