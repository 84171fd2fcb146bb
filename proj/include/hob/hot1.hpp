#pragma once

// HOT1 binary tensor files:
//   "HOT1" | u32 n, c, t, h, w (little-endian) | u8 dtype (0 = f32, 1 = f64) | data (little-endian)

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <type_traits>
#include <vector>

#include "hob/errors.hpp"
#include "hob/tensor.hpp"

namespace hob {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

namespace detail {

inline void put_u32(std::vector<unsigned char>& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

template <class U, class Bits>
void put_scalar(std::vector<unsigned char>& buf, U value) {
  auto bits = std::bit_cast<Bits>(value);
  for (std::size_t i = 0; i < sizeof(Bits); ++i) buf.push_back(static_cast<unsigned char>(bits >> (8 * i)));
}

template <class U, class Bits>
U get_scalar(const unsigned char* p) {
  Bits bits = 0;
  for (std::size_t i = 0; i < sizeof(Bits); ++i) bits |= static_cast<Bits>(p[i]) << (8 * i);
  return std::bit_cast<U>(bits);
}

}  // namespace detail

template <class T>
std::vector<unsigned char> encode_hot1(const Tensor5<T>& x) {
  const Shape5& s = x.shape();
  for (std::size_t d : {s.n, s.c, s.t, s.h, s.w}) {
    if (d > std::numeric_limits<std::uint32_t>::max()) throw ShapeError("HOT1 dimension exceeds u32");
  }
  std::vector<unsigned char> buf{'H', 'O', 'T', '1'};
  buf.reserve(21 + x.size() * sizeof(T));
  for (std::size_t d : {s.n, s.c, s.t, s.h, s.w}) detail::put_u32(buf, static_cast<std::uint32_t>(d));
  buf.push_back(static_cast<unsigned char>(dtype_of<T>()));
  for (T v : x.data()) {
    if constexpr (std::is_same_v<T, float>) {
      detail::put_scalar<float, std::uint32_t>(buf, v);
    } else {
      detail::put_scalar<double, std::uint64_t>(buf, v);
    }
  }
  return buf;
}

// Decodes either dtype and converts to T. `origin` names the source in error messages.
template <class T>
Tensor5<T> decode_hot1(const std::vector<unsigned char>& buf, const std::string& origin) {
  if (buf.size() < 25 || std::memcmp(buf.data(), "HOT1", 4) != 0) {
    throw FormatError(origin + ": bad HOT1 magic or truncated header");
  }
  Shape5 s{detail::get_u32(&buf[4]), detail::get_u32(&buf[8]), detail::get_u32(&buf[12]),
           detail::get_u32(&buf[16]), detail::get_u32(&buf[20])};
  const unsigned tag = buf[24];
  if (tag > 1) throw FormatError(origin + ": unknown HOT1 dtype tag " + std::to_string(tag));
  const std::size_t width = tag == 0 ? 4 : 8;
  if (buf.size() != 25 + s.numel() * width) {
    throw FormatError(origin + ": HOT1 payload size does not match header shape " + s.str());
  }
  std::vector<T> data(s.numel());
  const unsigned char* p = buf.data() + 25;
  for (std::size_t i = 0; i < data.size(); ++i, p += width) {
    data[i] = tag == 0 ? static_cast<T>(detail::get_scalar<float, std::uint32_t>(p))
                       : static_cast<T>(detail::get_scalar<double, std::uint64_t>(p));
  }
  return Tensor5<T>(s, std::move(data));
}

template <class T>
void write_hot1(const std::filesystem::path& path, const Tensor5<T>& x) {
  auto buf = encode_hot1(x);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

template <class T>
Tensor5<T> read_hot1(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string() + ": cannot open");
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_hot1<T>(buf, path.string());
}

}  // namespace hob
