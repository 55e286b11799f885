#pragma once

// Little-endian binary primitives and CRC32 shared by the checkpoint and
// store file formats. All multi-byte fields in eemb files are little-endian
// regardless of host order.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace eemb::io {

inline void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 24));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  put_u32(out, static_cast<std::uint32_t>(v));
  put_u32(out, static_cast<std::uint32_t>(v >> 32));
}

inline void put_f32(std::vector<std::uint8_t>& out, float v) {
  put_u32(out, std::bit_cast<std::uint32_t>(v));
}

inline void put_bytes(std::vector<std::uint8_t>& out, const std::uint8_t* p, std::size_t n) {
  out.insert(out.end(), p, p + n);
}

inline void put_string(std::vector<std::uint8_t>& out, const std::string& s) {
  if (s.size() > 0xFF) throw std::invalid_argument("io: string field too long");
  put_u8(out, static_cast<std::uint8_t>(s.size()));
  put_bytes(out, reinterpret_cast<const std::uint8_t*>(s.data()), s.size());
}

inline void put_f32_span(std::vector<std::uint8_t>& out, const float* p, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) put_f32(out, p[i]);
}

// Cursor over an in-memory byte buffer. Throws on under-read; the store's
// tail-recovery path catches and treats it as truncation.
class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}
  explicit Reader(const std::vector<std::uint8_t>& buf) : Reader(buf.data(), buf.size()) {}

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return size_ - pos_; }
  bool eof() const { return pos_ >= size_; }
  void seek(std::size_t p) {
    if (p > size_) throw std::out_of_range("io: seek past end");
    pos_ = p;
  }

  std::uint8_t u8() {
    need(1);
    return data_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = static_cast<std::uint32_t>(data_[pos_]) |
                      static_cast<std::uint32_t>(data_[pos_ + 1]) << 8 |
                      static_cast<std::uint32_t>(data_[pos_ + 2]) << 16 |
                      static_cast<std::uint32_t>(data_[pos_ + 3]) << 24;
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t lo = u32();
    std::uint64_t hi = u32();
    return lo | hi << 32;
  }
  float f32() { return std::bit_cast<float>(u32()); }

  std::string str() {
    std::size_t n = u8();
    need(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }

  void bytes(std::uint8_t* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, data_ + pos_, n);
    pos_ += n;
  }

  void f32_span(float* dst, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] = f32();
  }

 private:
  void need(std::size_t n) const {
    if (size_ - pos_ < n) throw std::out_of_range("io: read past end of buffer");
  }
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

// CRC-32 (IEEE 802.3, polynomial 0xEDB88320), table-driven.
inline std::uint32_t crc32(const std::uint8_t* data, std::size_t size, std::uint32_t seed = 0) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t c = seed ^ 0xFFFFFFFFu;
  for (std::size_t i = 0; i < size; ++i) c = table[(c ^ data[i]) & 0xFF] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

inline std::uint32_t crc32(const std::vector<std::uint8_t>& buf) {
  return crc32(buf.data(), buf.size());
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("io: cannot open for read: " + path);
  in.seekg(0, std::ios::end);
  std::streamoff n = in.tellg();
  in.seekg(0, std::ios::beg);
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(n));
  if (n > 0) in.read(reinterpret_cast<char*>(buf.data()), n);
  if (!in) throw std::runtime_error("io: short read: " + path);
  return buf;
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& buf) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("io: cannot open for write: " + path);
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("io: short write: " + path);
}

}  // namespace eemb::io
