#pragma once

// Little-endian byte encoding helpers shared by the binary formats.

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "muse/error.hpp"

namespace muse::detail {

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes,
                              std::uint32_t seed = 0) {
  uLong crc = seed;
  std::size_t offset = 0;
  // zlib takes uInt lengths; feed in bounded chunks.
  constexpr std::size_t kChunk = 1u << 30;
  while (offset < bytes.size()) {
    const std::size_t n = std::min(kChunk, bytes.size() - offset);
    crc = ::crc32(crc, bytes.data() + offset, static_cast<uInt>(n));
    offset += n;
  }
  return static_cast<std::uint32_t>(crc);
}

inline std::string hex32(std::uint32_t value) {
  char buf[9];
  std::snprintf(buf, sizeof(buf), "%08x", value);
  return buf;
}

/// "crc32:xxxxxxxx" of a file's content. Files ending in a CRC32 of the
/// preceding bytes (LTRJ, LTCM) are identified by that stored checksum, since
/// a CRC over data plus its own CRC is a constant.
inline std::string content_digest(std::span<const std::uint8_t> bytes) {
  if (bytes.size() >= 4) {
    const std::size_t body = bytes.size() - 4;
    std::uint32_t stored = 0;
    for (std::size_t i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(bytes[body + i]) << (8 * i);
    if (stored == crc32_of(bytes.first(body))) return "crc32:" + hex32(stored);
  }
  return "crc32:" + hex32(crc32_of(bytes));
}

class ByteWriter {
 public:
  template <typename T>
    requires std::is_unsigned_v<T>
  void put(T value) {
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      bytes_.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
    }
  }

  void put_f32(float value) { put(std::bit_cast<std::uint32_t>(value)); }
  void put_f64(double value) { put(std::bit_cast<std::uint64_t>(value)); }

  void put_bytes(std::string_view text) {
    bytes_.insert(bytes_.end(), text.begin(), text.end());
  }

  template <typename T>
    requires std::is_unsigned_v<T>
  void patch(std::size_t offset, T value) {
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      bytes_[offset + i] = static_cast<std::uint8_t>(value >> (8 * i));
    }
  }

  /// Appends the CRC32 of everything written so far.
  void put_crc() { put(crc32_of(bytes_)); }

  [[nodiscard]] std::size_t size() const { return bytes_.size(); }
  [[nodiscard]] const std::vector<std::uint8_t>& bytes() const { return bytes_; }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

/// Bounds-checked cursor over an immutable byte buffer. Reads past the end
/// return nullopt instead of throwing so validators can keep going.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
    requires std::is_unsigned_v<T>
  std::optional<T> get() {
    if (remaining() < sizeof(T)) {
      pos_ = bytes_.size();
      return std::nullopt;
    }
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      value |= static_cast<T>(static_cast<T>(bytes_[pos_ + i]) << (8 * i));
    }
    pos_ += sizeof(T);
    return value;
  }

  std::optional<std::string> get_string(std::size_t length) {
    if (remaining() < length) {
      pos_ = bytes_.size();
      return std::nullopt;
    }
    std::string out(reinterpret_cast<const char*>(bytes_.data() + pos_), length);
    pos_ += length;
    return out;
  }

  [[nodiscard]] std::size_t position() const { return pos_; }
  [[nodiscard]] std::size_t remaining() const { return bytes_.size() - pos_; }
  void seek(std::size_t pos) { pos_ = std::min(pos, bytes_.size()); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_all(std::istream& in) {
  std::vector<std::uint8_t> out{std::istreambuf_iterator<char>(in),
                                std::istreambuf_iterator<char>()};
  if (in.bad()) throw_internal("read failure");
  return out;
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw_data("cannot open '" + path + "'");
  return read_all(in);
}

inline std::size_t write_all(std::ostream& out,
                             std::span<const std::uint8_t> bytes) {
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw_internal("write failure");
  return bytes.size();
}

inline std::size_t write_file(const std::string& path,
                              std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw_internal("cannot open '" + path + "' for writing");
  return write_all(out, bytes);
}

}  // namespace muse::detail
