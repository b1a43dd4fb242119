#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

#include "chanorm/tensor.hpp"

namespace chanorm {

// Little-endian scalar I/O shared by the binary containers (norm layers,
// model checkpoints). Readers take a label naming the container so that
// truncation errors say what was being parsed.

inline void write_u8(std::ostream& os, std::uint8_t v) {
  os.put(static_cast<char>(v));
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void write_f64(std::ostream& os, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i)
    os.put(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline std::uint8_t read_u8(std::istream& is, const std::string& what) {
  const int c = is.get();
  if (c < 0) throw std::runtime_error(what + ": truncated stream");
  return static_cast<std::uint8_t>(c);
}

inline std::uint32_t read_u32(std::istream& is, const std::string& what) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(read_u8(is, what)) << (8 * i);
  return v;
}

inline double read_f64(std::istream& is, const std::string& what) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i)
    bits |= static_cast<std::uint64_t>(read_u8(is, what)) << (8 * i);
  return std::bit_cast<double>(bits);
}

inline void write_values(std::ostream& os, const Tensor& t) {
  for (double v : t.data) write_f64(os, v);
}

inline void read_values(std::istream& is, Tensor& t, const std::string& what) {
  for (double& v : t.data) v = read_f64(is, what);
}

}  // namespace chanorm
