#pragma once

// AFMX binary matrix format:
//   bytes 0..3  magic "AFMX"
//   u32 rows, u32 cols (little-endian)
//   rows*cols f64 payload, row-major, little-endian

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <string>

#include "asymflow/error.hpp"
#include "asymflow/matrix.hpp"

namespace asymflow::afmx {

inline constexpr char kMagic[4] = {'A', 'F', 'M', 'X'};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 8);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("afmx: truncated header");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw IoError("afmx: truncated payload");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void write(std::ostream& os, const Matrix& m) {
  if (m.rows() > std::numeric_limits<std::uint32_t>::max() ||
      m.cols() > std::numeric_limits<std::uint32_t>::max()) {
    throw IoError("afmx: matrix too large");
  }
  os.write(kMagic, 4);
  detail::put_u32(os, static_cast<std::uint32_t>(m.rows()));
  detail::put_u32(os, static_cast<std::uint32_t>(m.cols()));
  for (double x : m.data()) detail::put_u64(os, std::bit_cast<std::uint64_t>(x));
  if (!os) throw IoError("afmx: write failed");
}

inline Matrix read(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw IoError("afmx: bad magic");
  }
  const std::uint32_t rows = detail::get_u32(is);
  const std::uint32_t cols = detail::get_u32(is);
  Matrix m(rows, cols);
  for (auto& x : m.data()) x = std::bit_cast<double>(detail::get_u64(is));
  return m;
}

inline void save(const std::filesystem::path& path, const Matrix& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("afmx: cannot open " + path.string() + " for writing");
  write(os, m);
}

inline Matrix load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("afmx: cannot open " + path.string());
  return read(is);
}

}  // namespace asymflow::afmx
