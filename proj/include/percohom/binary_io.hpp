#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "percohom/errors.hpp"

// Little-endian fixed-width encoding, independent of host byte order.
namespace percohom::binary {

template <typename UInt>
void put_le(std::ostream& out, UInt value) {
  unsigned char buf[sizeof(UInt)];
  for (std::size_t i = 0; i < sizeof(UInt); ++i) {
    buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xffu);
  }
  out.write(reinterpret_cast<const char*>(buf), sizeof(UInt));
}

inline void put_f64(std::ostream& out, double value) {
  put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(value));
}

inline void put_magic(std::ostream& out, std::string_view magic) {
  out.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

template <typename UInt>
UInt get_le(std::istream& in) {
  unsigned char buf[sizeof(UInt)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(UInt))) {
    throw ValidationError("binary input truncated");
  }
  std::uint64_t value = 0;
  for (std::size_t i = 0; i < sizeof(UInt); ++i) {
    value |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  }
  return static_cast<UInt>(value);
}

inline double get_f64(std::istream& in) { return std::bit_cast<double>(get_le<std::uint64_t>(in)); }

inline void expect_magic(std::istream& in, std::string_view magic) {
  std::string got(magic.size(), '\0');
  if (!in.read(got.data(), static_cast<std::streamsize>(got.size())) || got != magic) {
    throw ValidationError("bad magic: expected \"" + std::string(magic) + "\"");
  }
}

}  // namespace percohom::binary
