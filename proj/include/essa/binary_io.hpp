#pragma once

// Little-endian byte encoding shared by every on-disk and on-wire format.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "essa/error.hpp"

namespace essa {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  void bytes(std::span<const std::uint8_t> data);
  void magic(std::string_view tag);
  // u16 length prefix followed by the raw UTF-8 bytes.
  void short_string(std::string_view s);

  const std::vector<std::uint8_t>& data() const { return buf_; }
  std::vector<std::uint8_t> take() { return std::move(buf_); }
  std::size_t size() const { return buf_.size(); }

 private:
  std::vector<std::uint8_t> buf_;
};

// Reads from a borrowed buffer. Every underflow throws Error(on_error).
class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> data, ErrorCode on_error)
      : data_(data), on_error_(on_error) {}

  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  std::span<const std::uint8_t> bytes(std::size_t n);
  void expect_magic(std::string_view tag);
  std::string short_string();

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }
  bool done() const { return pos_ == data_.size(); }
  [[noreturn]] void fail(const std::string& what) const;

 private:
  void need(std::size_t n) const;

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
  ErrorCode on_error_;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
// Writes to a sibling temp file then renames, so readers never see a torn file.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> data);

}  // namespace essa
