#pragma once

// Thin RAII layer over OpenSSL: SHA-256, HMAC, AES-256-GCM and ECDSA/P-256,
// plus the raw curve arithmetic the key hierarchy needs.

#include <array>
#include <memory>
#include <stdexcept>

#include "scl/bytes.hpp"

namespace scl::crypto {

class CryptoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Authenticated decryption failed: wrong key, or corrupted nonce/ciphertext/tag.
class DecryptError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kNonceBytes = 12;
inline constexpr std::size_t kTagBytes = 16;

using Signature = std::array<std::uint8_t, 64>;  // raw r || s
using Scalar = std::array<std::uint8_t, 32>;
using CompressedPoint = std::array<std::uint8_t, 33>;

Hash sha256(ByteView data);
std::array<std::uint8_t, 64> hmac_sha512(ByteView key, ByteView data);
Hash hmac_sha256(ByteView key, ByteView data);
void random_bytes(std::span<std::uint8_t> out);

struct SymmetricKey {
  std::array<std::uint8_t, 32> bytes{};
  friend bool operator==(const SymmetricKey&, const SymmetricKey&) = default;
};

/// AES-256-GCM; output is nonce(12) || ciphertext || tag(16) with a fresh random nonce.
Bytes aead_seal(const SymmetricKey& key, ByteView plaintext);
/// Inverse of aead_seal. Throws DecryptError on any authentication failure.
Bytes aead_open(const SymmetricKey& key, ByteView sealed);

class PublicKey {
 public:
  PublicKey();
  explicit PublicKey(const CompressedPoint& point);
  ~PublicKey();
  PublicKey(const PublicKey& other);
  PublicKey& operator=(const PublicKey& other);
  PublicKey(PublicKey&&) noexcept;
  PublicKey& operator=(PublicKey&&) noexcept;

  const CompressedPoint& compressed() const { return point_; }
  bool verify(const Hash& digest, const Signature& sig) const;

  /// this + tweak * G. Throws CryptoError if the result is the point at infinity.
  PublicKey add_tweak(const Scalar& tweak) const;

  friend bool operator==(const PublicKey& a, const PublicKey& b) { return a.point_ == b.point_; }

 private:
  struct Impl;
  CompressedPoint point_{};
  std::unique_ptr<Impl> impl_;
};

class PrivateKey {
 public:
  /// Throws CryptoError unless 0 < scalar < n.
  explicit PrivateKey(const Scalar& scalar);
  ~PrivateKey();
  PrivateKey(const PrivateKey& other);
  PrivateKey& operator=(const PrivateKey& other);
  PrivateKey(PrivateKey&&) noexcept;
  PrivateKey& operator=(PrivateKey&&) noexcept;

  static PrivateKey generate();

  const Scalar& scalar() const { return scalar_; }
  const PublicKey& public_key() const { return public_; }
  Signature sign(const Hash& digest) const;

  /// (this + tweak) mod n. Throws CryptoError if the sum is zero.
  PrivateKey add_tweak(const Scalar& tweak) const;

 private:
  struct Impl;
  Scalar scalar_{};
  PublicKey public_;
  std::unique_ptr<Impl> impl_;
};

/// Reduces 32 big-endian bytes modulo the P-256 group order.
Scalar reduce_scalar(ByteView bytes32);
bool scalar_is_zero(const Scalar& s);
/// (n - s) mod n.
Scalar negate_scalar(const Scalar& s);

}  // namespace scl::crypto
