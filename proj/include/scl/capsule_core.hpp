#pragma once

// Bit-exact DataCapsule record format: canonical encoding, sealing
// (encrypt, hash, sign), third-party verification and opening.
// PROTOCOL.md documents the byte layout.

#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "scl/bytes.hpp"
#include "scl/crypto.hpp"

namespace scl {

enum class MsgType : std::uint8_t {
  kData = 0,
  kRts = 1,
  kEoe = 2,
  kSync = 3,
  kRecoveryReq = 4,
  kRecoveryResp = 5,
};

const char* to_string(MsgType t);
std::optional<MsgType> msg_type_from_byte(std::uint8_t b);

struct RecordHeader {
  std::uint64_t sender_id = 0;
  std::uint64_t lamport_ts = 0;
  std::uint64_t epoch_seq = 0;
  MsgType msg_type = MsgType::kData;
  std::vector<Hash> prev_hashes;

  friend bool operator==(const RecordHeader&, const RecordHeader&) = default;
};

/// DATA carries exactly one parent, RTS/EOE/RECOVERY_* none, SYNC any number.
bool well_formed(const RecordHeader& h);

struct CapsuleRecord {
  RecordHeader header;
  Bytes ciphertext;  // nonce || AES-GCM body || tag
  Hash record_hash{};
  crypto::Signature signature{};

  friend bool operator==(const CapsuleRecord&, const CapsuleRecord&) = default;
};

/// One (k, v, t) tuple of a batched DATA payload.
struct KvEntry {
  Bytes key;
  Bytes value;
  std::uint64_t lamport_ts = 0;

  friend bool operator==(const KvEntry&, const KvEntry&) = default;
};

inline constexpr std::size_t kFixedHeaderBytes = 8 + 8 + 8 + 1 + 4;

/// sender_id, lamport_ts, epoch_seq (u64 BE), msg_type (u8), prev count (u32 BE),
/// prev hashes, ciphertext length (u32 BE), ciphertext.
Bytes canonical_encode(const RecordHeader& header, ByteView ciphertext);

/// Stages of sealing, exposed separately so the actor pipeline can encrypt and
/// sign in parallel while linking hashes in order.
Bytes encrypt_payload(const crypto::SymmetricKey& key, ByteView plaintext);
CapsuleRecord link_record(RecordHeader header, Bytes ciphertext);
void sign_record(CapsuleRecord& record, const crypto::PrivateKey& key);

/// Encrypt, hash and sign. Throws std::invalid_argument for a malformed
/// header or an empty DATA payload.
CapsuleRecord seal_record(RecordHeader header, ByteView plaintext, const crypto::SymmetricKey& enc_key,
                          const crypto::PrivateKey& sign_key);

enum class VerifyStatus { kOk, kBadHash, kBadSignature };
const char* to_string(VerifyStatus s);

/// Checks the digest first, then the signature. Never touches the payload key.
VerifyStatus verify_record(const CapsuleRecord& r, const crypto::PublicKey& verify_key);

/// Throws crypto::DecryptError on authentication failure.
Bytes open_record(const CapsuleRecord& r, const crypto::SymmetricKey& enc_key);

// Wire form of a whole record: canonical bytes || record_hash || signature.
Bytes serialize_record(const CapsuleRecord& r);
/// Throws ParseError on any structural problem (truncation, bad msg_type, trailing bytes).
CapsuleRecord parse_record(ByteView bytes);

/// Length-prefixed (u32 BE) stream of serialized records.
void write_record_stream(std::ostream& out, std::span<const CapsuleRecord> records);
std::vector<CapsuleRecord> read_record_stream(std::istream& in);

std::string base64_encode(ByteView data);
/// Strict: rejects bad length, bad alphabet and misplaced padding with ParseError.
Bytes base64_decode(std::string_view text);

/// One CSV line per entry: base64(key),base64(value),decimal lamport_ts.
Bytes encode_batch(std::span<const KvEntry> entries);
std::vector<KvEntry> decode_batch(ByteView csv);

}  // namespace scl
