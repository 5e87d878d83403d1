#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "knnmem/error.hpp"

namespace knnmem::detail {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

template <typename T>
void write_le(std::ostream& out, T value) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  out.write(bytes, sizeof(T));
}

template <typename T>
T read_le(std::istream& in, const char* what) {
  char bytes[sizeof(T)];
  if (!in.read(bytes, sizeof(T))) throw DataError(std::string("truncated file while reading ") + what);
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

inline void write_magic(std::ostream& out, const char (&magic)[9]) { out.write(magic, 8); }

inline void expect_magic(std::istream& in, const char (&magic)[9], const char* what) {
  char got[8];
  if (!in.read(got, 8) || std::memcmp(got, magic, 8) != 0) {
    throw DataError(std::string("bad magic: not a ") + what + " file");
  }
}

inline void write_blob(std::ostream& out, const std::string& blob) {
  write_le<std::uint64_t>(out, blob.size());
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
}

inline std::string read_blob(std::istream& in, const char* what, std::uint64_t limit = (1ULL << 34)) {
  const auto n = read_le<std::uint64_t>(in, what);
  if (n > limit) throw DataError(std::string("implausible length for ") + what);
  std::string blob(n, '\0');
  if (n && !in.read(blob.data(), static_cast<std::streamsize>(n))) {
    throw DataError(std::string("truncated file while reading ") + what);
  }
  return blob;
}

}  // namespace knnmem::detail
