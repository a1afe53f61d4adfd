#include "dmad/binary_io.hpp"

#include <fstream>
#include <limits>

namespace dmad::io {

void ByteWriter::short_string(std::string_view s) {
  if (s.size() > std::numeric_limits<std::uint16_t>::max()) {
    throw ValidationError("string too long for u16 length prefix");
  }
  u16(static_cast<std::uint16_t>(s.size()));
  bytes_.insert(bytes_.end(), s.begin(), s.end());
}

void ByteWriter::f32_array(std::span<const float> values) {
  bytes_.reserve(bytes_.size() + values.size() * 4);
  for (float v : values) f32(v);
}

void ByteReader::need(std::uint64_t n) const {
  if (n > remaining()) fail("truncated (needed " + std::to_string(n) + " more bytes)");
}

void ByteReader::fail(const std::string& msg) const {
  throw FormatError(what_ + ": " + msg + " at offset " + std::to_string(pos_));
}

std::uint64_t ByteReader::get_le(int width) {
  need(static_cast<std::uint64_t>(width));
  std::uint64_t v = 0;
  for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
  pos_ += static_cast<std::size_t>(width);
  return v;
}

void ByteReader::expect_magic(std::string_view m) {
  need(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (bytes_[pos_ + i] != static_cast<std::uint8_t>(m[i])) {
      fail("bad magic, expected '" + std::string(m) + "'");
    }
  }
  pos_ += m.size();
}

std::string ByteReader::short_string() {
  const std::uint16_t len = u16();
  need(len);
  std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), len);
  pos_ += len;
  return s;
}

std::vector<float> ByteReader::f32_array(std::uint64_t count) {
  if (count > remaining() / 4) fail("declared payload exceeds file size");
  std::vector<float> out(static_cast<std::size_t>(count));
  for (auto& v : out) v = f32();
  return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StorageError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw StorageError("read failure on " + path.string());
  return bytes;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw StorageError("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw StorageError("write failure on " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw StorageError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string read_text(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

}  // namespace dmad::io
