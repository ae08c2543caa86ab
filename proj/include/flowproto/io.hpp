#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace flowproto {

// Little-endian encoder for the binary checkpoint and dataset formats.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f64(double v);
  void raw(std::string_view bytes) { buf_.append(bytes); }
  // u32 length prefix followed by the bytes.
  void str(std::string_view s);

  const std::string& bytes() const noexcept { return buf_; }
  std::string take() { return std::move(buf_); }

 private:
  std::string buf_;
};

/// Decoder over a byte buffer; every read past the end raises ParseError
/// carrying the byte offset where the read started.
class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  double f64();
  std::string_view raw(std::size_t n);
  std::string str();

  std::size_t offset() const noexcept { return offset_; }
  std::size_t remaining() const noexcept { return bytes_.size() - offset_; }

 private:
  void need(std::size_t n, const char* what);

  std::string_view bytes_;
  std::size_t offset_ = 0;
};

std::uint32_t crc32(std::string_view bytes);

// Appends the CRC32 of `payload` to it.
std::string seal_with_crc(std::string payload);

/// Checks the trailing CRC32 and returns the payload without it. Throws
/// ParseError on a short buffer or checksum mismatch.
std::string_view verify_crc(std::string_view bytes, const char* format);

std::string read_file(const std::filesystem::path& path);

/// Writes to a sibling temporary file and renames it into place, so readers
/// never observe a partial file. Throws IoError.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace flowproto
