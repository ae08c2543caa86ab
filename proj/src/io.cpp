#include "flowproto/io.hpp"

#include "flowproto/errors.hpp"

#include <zlib.h>

#include <bit>
#include <fstream>
#include <sstream>
#include <system_error>

namespace flowproto {

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void ByteWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::str(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  buf_.append(s);
}

void ByteReader::need(std::size_t n, const char* what) {
  if (remaining() < n) {
    throw ParseError("unexpected end of data reading " + std::string(what) + " at byte " +
                         std::to_string(offset_),
                     offset_);
  }
}

std::uint8_t ByteReader::u8() {
  need(1, "u8");
  return static_cast<std::uint8_t>(bytes_[offset_++]);
}

std::uint32_t ByteReader::u32() {
  need(4, "u32");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[offset_ + i])) << (8 * i);
  offset_ += 4;
  return v;
}

std::uint64_t ByteReader::u64() {
  need(8, "u64");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[offset_ + i])) << (8 * i);
  offset_ += 8;
  return v;
}

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::string_view ByteReader::raw(std::size_t n) {
  need(n, "bytes");
  std::string_view out = bytes_.substr(offset_, n);
  offset_ += n;
  return out;
}

std::string ByteReader::str() {
  const std::uint32_t n = u32();
  return std::string(raw(n));
}

std::uint32_t crc32(std::string_view bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  crc = ::crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

std::string seal_with_crc(std::string payload) {
  const std::uint32_t crc = crc32(payload);
  ByteWriter w;
  w.u32(crc);
  payload += w.bytes();
  return payload;
}

std::string_view verify_crc(std::string_view bytes, const char* format) {
  if (bytes.size() < 4) {
    throw ParseError(std::string(format) + ": file too short for a checksum", bytes.size());
  }
  std::string_view payload = bytes.substr(0, bytes.size() - 4);
  ByteReader tail(bytes.substr(bytes.size() - 4));
  const std::uint32_t stored = tail.u32();
  if (stored != crc32(payload)) {
    throw ParseError(std::string(format) + ": CRC32 mismatch at byte " + std::to_string(payload.size()),
                     payload.size());
  }
  return payload;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed for " + path.string());
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw IoError("write failed for " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    const std::string reason = ec.message();
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot move " + tmp.string() + " into place: " + reason);
  }
}

}  // namespace flowproto
