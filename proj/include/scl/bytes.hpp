#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace scl {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

/// 32-byte SHA-256 digest. The all-zero digest is the genesis sentinel.
using Hash = std::array<std::uint8_t, 32>;

inline constexpr Hash kGenesis{};

struct HashLess {
  bool operator()(const Hash& a, const Hash& b) const noexcept { return a < b; }
};

struct HashHasher {
  std::size_t operator()(const Hash& h) const noexcept {
    std::size_t v = 0;
    for (int i = 0; i < 8; ++i) v = (v << 8) | h[i];
    return v;
  }
};

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline Bytes to_bytes(std::string_view s) { return Bytes(s.begin(), s.end()); }
inline std::string to_string(ByteView b) { return std::string(b.begin(), b.end()); }

std::string to_hex(ByteView b);
inline std::string to_hex(const Hash& h) { return to_hex(ByteView(h)); }
/// First `n` hex characters of a digest, for logs and traces.
std::string hash_prefix(const Hash& h, std::size_t n = 8);
Hash hash_from_hex(std::string_view hex);

/// Big-endian fixed-width writer used by every wire format in the library.
class ByteWriter {
 public:
  ByteWriter() = default;
  explicit ByteWriter(std::size_t reserve) { buf_.reserve(reserve); }

  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) {
    u8(static_cast<std::uint8_t>(v >> 8));
    u8(static_cast<std::uint8_t>(v));
  }
  void u32(std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) u8(static_cast<std::uint8_t>(v >> s));
  }
  void u64(std::uint64_t v) {
    for (int s = 56; s >= 0; s -= 8) u8(static_cast<std::uint8_t>(v >> s));
  }
  void raw(ByteView b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void hash(const Hash& h) { raw(h); }
  /// u32 length prefix followed by the bytes.
  void blob(ByteView b) {
    u32(static_cast<std::uint32_t>(b.size()));
    raw(b);
  }

  Bytes take() && { return std::move(buf_); }
  const Bytes& bytes() const { return buf_; }
  std::size_t size() const { return buf_.size(); }

 private:
  Bytes buf_;
};

/// Bounds-checked reader; every overrun throws ParseError.
class ByteReader {
 public:
  explicit ByteReader(ByteView data) : data_(data) {}

  std::uint8_t u8() {
    need(1);
    return data_[pos_++];
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>((data_[pos_] << 8) | data_[pos_ + 1]);
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | data_[pos_++];
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v = (v << 8) | data_[pos_++];
    return v;
  }
  ByteView raw(std::size_t n) {
    need(n);
    ByteView v = data_.subspan(pos_, n);
    pos_ += n;
    return v;
  }
  Hash hash() {
    Hash h;
    auto v = raw(h.size());
    std::copy(v.begin(), v.end(), h.begin());
    return h;
  }
  Bytes blob() {
    auto n = u32();
    auto v = raw(n);
    return Bytes(v.begin(), v.end());
  }

  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }
  bool done() const { return pos_ == data_.size(); }
  void expect_done() const {
    if (!done()) throw ParseError("trailing bytes");
  }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw ParseError("truncated input");
  }

  ByteView data_;
  std::size_t pos_ = 0;
};

}  // namespace scl
