#pragma once

// Little-endian byte encoding shared by the .dmft/.dmmk/.dmbk/.dmckpt formats.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dmad/error.hpp"

namespace dmad::io {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) { put_le(v, 2); }
  void u32(std::uint32_t v) { put_le(v, 4); }
  void u64(std::uint64_t v) { put_le(v, 8); }
  void f32(float v) { put_le(std::bit_cast<std::uint32_t>(v), 4); }
  void magic(std::string_view m) { bytes_.insert(bytes_.end(), m.begin(), m.end()); }
  // u16 length prefix followed by the raw bytes.
  void short_string(std::string_view s);
  void f32_array(std::span<const float> values);

  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  void put_le(std::uint64_t v, int width) {
    for (int i = 0; i < width; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> bytes_;
};

// Bounds-checked cursor; every overrun raises FormatError naming `what`.
class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, std::string what)
      : bytes_(bytes), what_(std::move(what)) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get_le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get_le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get_le(4)); }
  std::uint64_t u64() { return get_le(8); }
  float f32() { return std::bit_cast<float>(static_cast<std::uint32_t>(get_le(4))); }
  void expect_magic(std::string_view m);
  std::string short_string();
  // Reads `count` floats; the remaining length is checked before allocating.
  std::vector<float> f32_array(std::uint64_t count);

  std::size_t remaining() const { return bytes_.size() - pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }
  [[noreturn]] void fail(const std::string& msg) const;

 private:
  std::uint64_t get_le(int width);
  void need(std::uint64_t n) const;

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
  std::string what_;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
// Writes via a sibling temp file and rename so readers never observe partial files.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, std::string_view text);
std::string read_text(const std::filesystem::path& path);

}  // namespace dmad::io
