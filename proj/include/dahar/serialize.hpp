#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "dahar/tensor.hpp"

namespace dahar {

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

// Tensor record wire format (all integers little-endian):
//   u32   name length
//   bytes name (UTF-8)
//   u8    dtype tag: 0 = f32, 1 = f64
//   u32   rank
//   u64   extents[rank]
//   raw   values, IEEE-754 little-endian, row-major

namespace detail {

template <typename U>
void write_le(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U read_le(std::istream& is, const std::string& file) {
  U v;
  is.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!is)
    throw ParseError("truncated read in " + file + " at byte offset " +
                     std::to_string(static_cast<long long>(is.tellg())));
  return v;
}

template <typename T>
constexpr uint8_t dtype_tag() {
  return sizeof(T) == 4 ? 0 : 1;
}

}  // namespace detail

template <typename T>
void write_tensor_record(std::ostream& os, const std::string& name, const Tensor<T>& t) {
  detail::write_le<uint32_t>(os, static_cast<uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  detail::write_le<uint8_t>(os, detail::dtype_tag<T>());
  detail::write_le<uint32_t>(os, static_cast<uint32_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i)
    detail::write_le<uint64_t>(os, static_cast<uint64_t>(t.dim(i)));
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * static_cast<int64_t>(sizeof(T))));
}

template <typename T>
std::pair<std::string, Tensor<T>> read_tensor_record(std::istream& is, const std::string& file) {
  uint32_t name_len = detail::read_le<uint32_t>(is, file);
  std::string name(name_len, '\0');
  is.read(name.data(), name_len);
  if (!is) throw ParseError("truncated tensor name in " + file);
  uint8_t tag = detail::read_le<uint8_t>(is, file);
  if (tag != detail::dtype_tag<T>())
    throw ParseError("dtype mismatch for tensor '" + name + "' in " + file + ": stored tag " +
                     std::to_string(tag) + ", expected " + std::to_string(detail::dtype_tag<T>()));
  uint32_t rank = detail::read_le<uint32_t>(is, file);
  Shape shape(rank);
  for (uint32_t i = 0; i < rank; ++i)
    shape[i] = static_cast<int>(detail::read_le<uint64_t>(is, file));
  Tensor<T> t(shape);
  is.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(t.numel() * static_cast<int64_t>(sizeof(T))));
  if (!is)
    throw ParseError("truncated tensor payload for '" + name + "' in " + file);
  return {name, t};
}

inline std::string file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParseError("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline uint64_t fnv1a64(const std::string& bytes) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace dahar
