#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace enelf {

enum class IoCode {
  OpenFail,
  BadMagic,
  BadVersion,
  Truncated,
  BadChecksum,
  BadFormat,
};

struct IoError : std::runtime_error {
  IoCode code;
  IoError(IoCode c, const std::string& msg)
      : std::runtime_error(msg), code(c) {}
};

inline const char* io_code_name(IoCode c) {
  switch (c) {
    case IoCode::OpenFail: return "open-fail";
    case IoCode::BadMagic: return "bad-magic";
    case IoCode::BadVersion: return "bad-version";
    case IoCode::Truncated: return "truncated";
    case IoCode::BadChecksum: return "bad-checksum";
    case IoCode::BadFormat: return "bad-format";
  }
  return "?";
}

// Little-endian byte sink. Everything is buffered so the trailing CRC32
// can cover all preceding bytes.
class ByteWriter {
public:
  void raw(const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u8(uint8_t v) { raw(&v, 1); }
  void u16(uint16_t v) { le(v); }
  void u32(uint32_t v) { le(v); }
  void u64(uint64_t v) { le(v); }
  void f32(float v) {
    const uint32_t bits = std::bit_cast<uint32_t>(v);
    le(bits);
  }
  void text(const std::string& s) { raw(s.data(), s.size()); }

  void f32_array(const float* p, size_t n) {
    for (size_t i = 0; i < n; ++i) f32(p[i]);
  }

  // appends CRC32 (IEEE, zlib) of everything written so far
  void finish_crc() {
    const uint32_t crc = static_cast<uint32_t>(
        ::crc32(0L, buf_.data(), static_cast<uInt>(buf_.size())));
    u32(crc);
  }

  const std::vector<uint8_t>& bytes() const { return buf_; }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError(IoCode::OpenFail, "cannot open for write: " + path);
    f.write(reinterpret_cast<const char*>(buf_.data()),
            static_cast<std::streamsize>(buf_.size()));
    if (!f) throw IoError(IoCode::OpenFail, "write failed: " + path);
  }

private:
  template <typename U>
  void le(U v) {
    for (size_t i = 0; i < sizeof(U); ++i)
      buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
  std::vector<uint8_t> buf_;
};

class ByteReader {
public:
  explicit ByteReader(std::vector<uint8_t> bytes)
      : buf_(std::move(bytes)), end_(buf_.size()) {}

  static ByteReader from_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError(IoCode::OpenFail, "cannot open: " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    return ByteReader(std::move(bytes));
  }

  // validates the trailing CRC32 over all preceding bytes and excludes it
  // from the readable range
  void check_crc() {
    if (buf_.size() < 4)
      throw IoError(IoCode::Truncated, "file shorter than its checksum");
    const size_t body = buf_.size() - 4;
    uint32_t stored = 0;
    for (size_t i = 0; i < 4; ++i)
      stored |= static_cast<uint32_t>(buf_[body + i]) << (8 * i);
    const uint32_t actual = static_cast<uint32_t>(
        ::crc32(0L, buf_.data(), static_cast<uInt>(body)));
    if (stored != actual)
      throw IoError(IoCode::BadChecksum, "checksum mismatch");
    end_ = body;
  }

  void raw(void* p, size_t n) {
    if (pos_ + n > end_) throw IoError(IoCode::Truncated, "unexpected EOF");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  uint8_t u8() {
    uint8_t v;
    raw(&v, 1);
    return v;
  }
  uint16_t u16() { return le<uint16_t>(); }
  uint32_t u32() { return le<uint32_t>(); }
  uint64_t u64() { return le<uint64_t>(); }
  float f32() { return std::bit_cast<float>(le<uint32_t>()); }
  std::string text(size_t n) {
    if (pos_ + n > end_) throw IoError(IoCode::Truncated, "unexpected EOF");
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void f32_array(float* p, size_t n) {
    for (size_t i = 0; i < n; ++i) p[i] = f32();
  }

  size_t remaining() const { return end_ - pos_; }

private:
  template <typename U>
  U le() {
    if (pos_ + sizeof(U) > end_)
      throw IoError(IoCode::Truncated, "unexpected EOF");
    U v = 0;
    for (size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(buf_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }

  std::vector<uint8_t> buf_;
  size_t pos_ = 0;
  size_t end_ = 0;
};

}  // namespace enelf
