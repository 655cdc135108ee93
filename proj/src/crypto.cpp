#define OPENSSL_SUPPRESS_DEPRECATED 1

#include "scl/crypto.hpp"

#include <openssl/bn.h>
#include <openssl/ec.h>
#include <openssl/ecdsa.h>
#include <openssl/evp.h>
#include <openssl/hmac.h>
#include <openssl/obj_mac.h>
#include <openssl/rand.h>
#include <openssl/sha.h>

#include <cstring>

namespace scl::crypto {
namespace {

template <typename T, void (*Free)(T*)>
struct Deleter {
  void operator()(T* p) const noexcept { Free(p); }
};

using BnPtr = std::unique_ptr<BIGNUM, Deleter<BIGNUM, BN_free>>;
using BnCtxPtr = std::unique_ptr<BN_CTX, Deleter<BN_CTX, BN_CTX_free>>;
using PointPtr = std::unique_ptr<EC_POINT, Deleter<EC_POINT, EC_POINT_free>>;
using EcKeyPtr = std::unique_ptr<EC_KEY, Deleter<EC_KEY, EC_KEY_free>>;
using SigPtr = std::unique_ptr<ECDSA_SIG, Deleter<ECDSA_SIG, ECDSA_SIG_free>>;
using CipherCtxPtr = std::unique_ptr<EVP_CIPHER_CTX, Deleter<EVP_CIPHER_CTX, EVP_CIPHER_CTX_free>>;

const EC_GROUP* group() {
  static const EC_GROUP* g = EC_GROUP_new_by_curve_name(NID_X9_62_prime256v1);
  return g;
}

const BIGNUM* order() { return EC_GROUP_get0_order(group()); }

void check(int ok, const char* what) {
  if (ok != 1) throw CryptoError(what);
}

BnPtr bn_from(ByteView b) {
  BnPtr bn(BN_bin2bn(b.data(), static_cast<int>(b.size()), nullptr));
  if (!bn) throw CryptoError("BN_bin2bn");
  return bn;
}

Scalar bn_to_scalar(const BIGNUM* bn) {
  Scalar out{};
  check(BN_bn2binpad(bn, out.data(), static_cast<int>(out.size())) == 32 ? 1 : 0, "BN_bn2binpad");
  return out;
}

PointPtr decode_point(const CompressedPoint& p) {
  PointPtr pt(EC_POINT_new(group()));
  BnCtxPtr ctx(BN_CTX_new());
  check(EC_POINT_oct2point(group(), pt.get(), p.data(), p.size(), ctx.get()), "invalid public key");
  return pt;
}

CompressedPoint encode_point(const EC_POINT* pt) {
  CompressedPoint out{};
  BnCtxPtr ctx(BN_CTX_new());
  auto n = EC_POINT_point2oct(group(), pt, POINT_CONVERSION_COMPRESSED, out.data(), out.size(), ctx.get());
  if (n != out.size()) throw CryptoError("EC_POINT_point2oct");
  return out;
}

}  // namespace

Hash sha256(ByteView data) {
  Hash h;
  SHA256(data.data(), data.size(), h.data());
  return h;
}

std::array<std::uint8_t, 64> hmac_sha512(ByteView key, ByteView data) {
  std::array<std::uint8_t, 64> out{};
  unsigned int len = 0;
  if (!HMAC(EVP_sha512(), key.data(), static_cast<int>(key.size()), data.data(), data.size(), out.data(), &len))
    throw CryptoError("HMAC-SHA512");
  return out;
}

Hash hmac_sha256(ByteView key, ByteView data) {
  Hash out{};
  unsigned int len = 0;
  if (!HMAC(EVP_sha256(), key.data(), static_cast<int>(key.size()), data.data(), data.size(), out.data(), &len))
    throw CryptoError("HMAC-SHA256");
  return out;
}

void random_bytes(std::span<std::uint8_t> out) {
  check(RAND_bytes(out.data(), static_cast<int>(out.size())), "RAND_bytes");
}

Bytes aead_seal(const SymmetricKey& key, ByteView plaintext) {
  Bytes out(kNonceBytes + plaintext.size() + kTagBytes);
  random_bytes(std::span(out.data(), kNonceBytes));
  CipherCtxPtr ctx(EVP_CIPHER_CTX_new());
  check(EVP_EncryptInit_ex(ctx.get(), EVP_aes_256_gcm(), nullptr, key.bytes.data(), out.data()), "EncryptInit");
  int len = 0;
  if (!plaintext.empty())
    check(EVP_EncryptUpdate(ctx.get(), out.data() + kNonceBytes, &len, plaintext.data(),
                            static_cast<int>(plaintext.size())),
          "EncryptUpdate");
  int fin = 0;
  check(EVP_EncryptFinal_ex(ctx.get(), out.data() + kNonceBytes + len, &fin), "EncryptFinal");
  check(EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_GET_TAG, kTagBytes,
                            out.data() + kNonceBytes + plaintext.size()),
        "GET_TAG");
  return out;
}

Bytes aead_open(const SymmetricKey& key, ByteView sealed) {
  if (sealed.size() < kNonceBytes + kTagBytes) throw DecryptError("ciphertext too short");
  const std::size_t body = sealed.size() - kNonceBytes - kTagBytes;
  Bytes out(body);
  CipherCtxPtr ctx(EVP_CIPHER_CTX_new());
  if (EVP_DecryptInit_ex(ctx.get(), EVP_aes_256_gcm(), nullptr, key.bytes.data(), sealed.data()) != 1)
    throw DecryptError("DecryptInit");
  int len = 0;
  if (body > 0 && EVP_DecryptUpdate(ctx.get(), out.data(), &len, sealed.data() + kNonceBytes,
                                    static_cast<int>(body)) != 1)
    throw DecryptError("DecryptUpdate");
  std::array<std::uint8_t, kTagBytes> tag;
  std::memcpy(tag.data(), sealed.data() + kNonceBytes + body, kTagBytes);
  if (EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_SET_TAG, kTagBytes, tag.data()) != 1)
    throw DecryptError("SET_TAG");
  int fin = 0;
  if (EVP_DecryptFinal_ex(ctx.get(), out.data() + len, &fin) != 1)
    throw DecryptError("authentication tag mismatch");
  return out;
}

Scalar reduce_scalar(ByteView bytes32) {
  auto bn = bn_from(bytes32);
  BnCtxPtr ctx(BN_CTX_new());
  BnPtr r(BN_new());
  check(BN_nnmod(r.get(), bn.get(), order(), ctx.get()), "BN_nnmod");
  return bn_to_scalar(r.get());
}

bool scalar_is_zero(const Scalar& s) {
  for (auto b : s)
    if (b != 0) return false;
  return true;
}

Scalar negate_scalar(const Scalar& s) {
  auto a = bn_from(s);
  BnCtxPtr ctx(BN_CTX_new());
  BnPtr r(BN_new());
  check(BN_mod_sub(r.get(), order(), a.get(), order(), ctx.get()), "BN_mod_sub");
  return bn_to_scalar(r.get());
}

// ---------------------------------------------------------------- PublicKey

struct PublicKey::Impl {
  EcKeyPtr key;
};

PublicKey::PublicKey() = default;

PublicKey::PublicKey(const CompressedPoint& point) : point_(point), impl_(std::make_unique<Impl>()) {
  auto pt = decode_point(point);
  impl_->key.reset(EC_KEY_new());
  check(EC_KEY_set_group(impl_->key.get(), group()), "EC_KEY_set_group");
  check(EC_KEY_set_public_key(impl_->key.get(), pt.get()), "EC_KEY_set_public_key");
}

PublicKey::~PublicKey() = default;
PublicKey::PublicKey(const PublicKey& other) : point_(other.point_) {
  if (other.impl_) impl_ = std::make_unique<Impl>(Impl{EcKeyPtr(EC_KEY_dup(other.impl_->key.get()))});
}
PublicKey& PublicKey::operator=(const PublicKey& other) {
  if (this != &other) *this = PublicKey(other);
  return *this;
}
PublicKey::PublicKey(PublicKey&&) noexcept = default;
PublicKey& PublicKey::operator=(PublicKey&&) noexcept = default;

bool PublicKey::verify(const Hash& digest, const Signature& sig) const {
  if (!impl_) return false;
  SigPtr s(ECDSA_SIG_new());
  BIGNUM* r = BN_bin2bn(sig.data(), 32, nullptr);
  BIGNUM* ss = BN_bin2bn(sig.data() + 32, 32, nullptr);
  if (!r || !ss || ECDSA_SIG_set0(s.get(), r, ss) != 1) {
    BN_free(r);
    BN_free(ss);
    return false;
  }
  return ECDSA_do_verify(digest.data(), static_cast<int>(digest.size()), s.get(), impl_->key.get()) == 1;
}

PublicKey PublicKey::add_tweak(const Scalar& tweak) const {
  BnCtxPtr ctx(BN_CTX_new());
  auto base = decode_point(point_);
  auto t = bn_from(tweak);
  PointPtr tg(EC_POINT_new(group()));
  check(EC_POINT_mul(group(), tg.get(), t.get(), nullptr, nullptr, ctx.get()), "EC_POINT_mul");
  PointPtr sum(EC_POINT_new(group()));
  check(EC_POINT_add(group(), sum.get(), base.get(), tg.get(), ctx.get()), "EC_POINT_add");
  if (EC_POINT_is_at_infinity(group(), sum.get())) throw CryptoError("derived point at infinity");
  return PublicKey(encode_point(sum.get()));
}

// --------------------------------------------------------------- PrivateKey

struct PrivateKey::Impl {
  EcKeyPtr key;
};

PrivateKey::PrivateKey(const Scalar& scalar) : scalar_(scalar), impl_(std::make_unique<Impl>()) {
  auto d = bn_from(scalar);
  if (BN_is_zero(d.get()) || BN_cmp(d.get(), order()) >= 0) throw CryptoError("scalar out of range");
  BnCtxPtr ctx(BN_CTX_new());
  PointPtr pub(EC_POINT_new(group()));
  check(EC_POINT_mul(group(), pub.get(), d.get(), nullptr, nullptr, ctx.get()), "EC_POINT_mul");
  impl_->key.reset(EC_KEY_new());
  check(EC_KEY_set_group(impl_->key.get(), group()), "EC_KEY_set_group");
  check(EC_KEY_set_private_key(impl_->key.get(), d.get()), "EC_KEY_set_private_key");
  check(EC_KEY_set_public_key(impl_->key.get(), pub.get()), "EC_KEY_set_public_key");
  public_ = PublicKey(encode_point(pub.get()));
}

PrivateKey::~PrivateKey() = default;
PrivateKey::PrivateKey(const PrivateKey& other)
    : scalar_(other.scalar_),
      public_(other.public_),
      impl_(std::make_unique<Impl>(Impl{EcKeyPtr(EC_KEY_dup(other.impl_->key.get()))})) {}
PrivateKey& PrivateKey::operator=(const PrivateKey& other) {
  if (this != &other) *this = PrivateKey(other);
  return *this;
}
PrivateKey::PrivateKey(PrivateKey&&) noexcept = default;
PrivateKey& PrivateKey::operator=(PrivateKey&&) noexcept = default;

PrivateKey PrivateKey::generate() {
  for (;;) {
    Scalar s;
    random_bytes(s);
    auto r = reduce_scalar(s);
    if (!scalar_is_zero(r)) return PrivateKey(r);
  }
}

Signature PrivateKey::sign(const Hash& digest) const {
  SigPtr s(ECDSA_do_sign(digest.data(), static_cast<int>(digest.size()), impl_->key.get()));
  if (!s) throw CryptoError("ECDSA_do_sign");
  const BIGNUM* r = nullptr;
  const BIGNUM* ss = nullptr;
  ECDSA_SIG_get0(s.get(), &r, &ss);
  Signature out{};
  check(BN_bn2binpad(r, out.data(), 32) == 32 ? 1 : 0, "sig r");
  check(BN_bn2binpad(ss, out.data() + 32, 32) == 32 ? 1 : 0, "sig s");
  return out;
}

PrivateKey PrivateKey::add_tweak(const Scalar& tweak) const {
  auto a = bn_from(scalar_);
  auto b = bn_from(tweak);
  BnCtxPtr ctx(BN_CTX_new());
  BnPtr sum(BN_new());
  check(BN_mod_add(sum.get(), a.get(), b.get(), order(), ctx.get()), "BN_mod_add");
  if (BN_is_zero(sum.get())) throw CryptoError("derived scalar is zero");
  return PrivateKey(bn_to_scalar(sum.get()));
}

}  // namespace scl::crypto
