#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <type_traits>

namespace semcom::bytes {

// Little-endian encoding of fixed-width integers and IEEE floats,
// independent of host byte order.

template <typename U>
  requires std::is_unsigned_v<U>
void put_uint(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
}

template <typename U>
  requires std::is_unsigned_v<U>
U get_uint(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(p[i]) << (8 * i));
  return v;
}

inline void put_f32(std::string& out, float f) { put_uint(out, std::bit_cast<std::uint32_t>(f)); }
inline void put_f64(std::string& out, double f) { put_uint(out, std::bit_cast<std::uint64_t>(f)); }

inline float get_f32(const unsigned char* p) { return std::bit_cast<float>(get_uint<std::uint32_t>(p)); }
inline double get_f64(const unsigned char* p) { return std::bit_cast<double>(get_uint<std::uint64_t>(p)); }

inline const unsigned char* data(const std::string& s) {
  return reinterpret_cast<const unsigned char*>(s.data());
}

}  // namespace semcom::bytes
