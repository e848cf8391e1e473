#pragma once

// Little-endian byte encoding and atomic file replacement.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <unistd.h>

#include "sprout/error.hpp"

namespace sprout {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(std::string_view s) { buf_.append(s); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  const std::string& data() const { return buf_; }

 private:
  std::string buf_;
};

// Reads from a byte buffer; every read names the section it belongs to so a
// truncated file reports where it ended.
class ByteReader {
 public:
  ByteReader(std::string_view data, std::string file) : data_(data), file_(std::move(file)) {}

  void need(std::size_t n, std::string_view section) const {
    if (data_.size() - pos_ < n)
      throw FormatError(file_ + ": truncated in " + std::string(section) + " at byte " + std::to_string(pos_));
  }
  std::uint8_t u8(std::string_view section) {
    need(1, section);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint32_t u32(std::string_view section) {
    need(4, section);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(std::string_view section) {
    need(8, section);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32(std::string_view section) { return std::bit_cast<float>(u32(section)); }
  std::string bytes(std::size_t n, std::string_view section) {
    need(n, section);
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::string str(std::string_view section) { return bytes(u32(section), section); }

  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }
  const std::string& file() const { return file_; }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
  std::string file_;
};

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError("cannot open '" + path.string() + "'");
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IngestError("failed reading '" + path.string() + "'");
  return data;
}

inline std::filesystem::path temp_sibling(const std::filesystem::path& path) {
  auto tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  return tmp;
}

// Writes via a sibling temp file and rename, so readers only ever see the old
// or the new content. On failure the temp file is removed and the target is
// left untouched.
template <class Fn>
void atomic_write_with(const std::filesystem::path& path, Fn&& write_tmp) {
  const auto tmp = temp_sibling(path);
  try {
    write_tmp(tmp);
  } catch (...) {
    std::error_code ec;
    std::filesystem::remove(tmp, ec);
    throw;
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw PersistError("cannot move temp file onto '" + path.string() + "'");
  }
}

inline void atomic_write(const std::filesystem::path& path, std::string_view content) {
  atomic_write_with(path, [&](const std::filesystem::path& tmp) {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw PersistError("cannot open '" + tmp.string() + "' for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw PersistError("write failed for '" + path.string() + "'");
    out.close();
    if (out.fail()) throw PersistError("close failed for '" + path.string() + "'");
  });
}

}  // namespace sprout
