#include "scl/capsule_core.hpp"

#include <openssl/evp.h>

#include <charconv>
#include <istream>
#include <ostream>

namespace scl {

const char* to_string(MsgType t) {
  switch (t) {
    case MsgType::kData: return "DATA";
    case MsgType::kRts: return "RTS";
    case MsgType::kEoe: return "EOE";
    case MsgType::kSync: return "SYNC";
    case MsgType::kRecoveryReq: return "RECOVERY_REQ";
    case MsgType::kRecoveryResp: return "RECOVERY_RESP";
  }
  return "?";
}

std::optional<MsgType> msg_type_from_byte(std::uint8_t b) {
  if (b > static_cast<std::uint8_t>(MsgType::kRecoveryResp)) return std::nullopt;
  return static_cast<MsgType>(b);
}

const char* to_string(VerifyStatus s) {
  switch (s) {
    case VerifyStatus::kOk: return "ok";
    case VerifyStatus::kBadHash: return "bad_hash";
    case VerifyStatus::kBadSignature: return "bad_signature";
  }
  return "?";
}

bool well_formed(const RecordHeader& h) {
  switch (h.msg_type) {
    case MsgType::kData: return h.prev_hashes.size() == 1;
    case MsgType::kSync: return true;
    default: return h.prev_hashes.empty();
  }
}

Bytes canonical_encode(const RecordHeader& header, ByteView ciphertext) {
  ByteWriter w(kFixedHeaderBytes + 32 * header.prev_hashes.size() + 4 + ciphertext.size());
  w.u64(header.sender_id);
  w.u64(header.lamport_ts);
  w.u64(header.epoch_seq);
  w.u8(static_cast<std::uint8_t>(header.msg_type));
  w.u32(static_cast<std::uint32_t>(header.prev_hashes.size()));
  for (const auto& h : header.prev_hashes) w.hash(h);
  w.blob(ciphertext);
  return std::move(w).take();
}

namespace {

RecordHeader read_header(ByteReader& r) {
  RecordHeader h;
  h.sender_id = r.u64();
  h.lamport_ts = r.u64();
  h.epoch_seq = r.u64();
  auto t = msg_type_from_byte(r.u8());
  if (!t) throw ParseError("unknown msg_type");
  h.msg_type = *t;
  auto n = r.u32();
  if (n > r.remaining() / 32) throw ParseError("prev_hash count exceeds input");
  h.prev_hashes.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) h.prev_hashes.push_back(r.hash());
  if (!well_formed(h)) throw ParseError("header violates prev_hash arity");
  return h;
}

}  // namespace

Bytes encrypt_payload(const crypto::SymmetricKey& key, ByteView plaintext) {
  return crypto::aead_seal(key, plaintext);
}

CapsuleRecord link_record(RecordHeader header, Bytes ciphertext) {
  if (!well_formed(header)) throw std::invalid_argument("malformed record header");
  CapsuleRecord r;
  r.record_hash = crypto::sha256(canonical_encode(header, ciphertext));
  r.header = std::move(header);
  r.ciphertext = std::move(ciphertext);
  return r;
}

void sign_record(CapsuleRecord& record, const crypto::PrivateKey& key) {
  record.signature = key.sign(record.record_hash);
}

CapsuleRecord seal_record(RecordHeader header, ByteView plaintext, const crypto::SymmetricKey& enc_key,
                          const crypto::PrivateKey& sign_key) {
  if (header.msg_type == MsgType::kData && plaintext.empty())
    throw std::invalid_argument("DATA record requires a non-empty payload");
  auto r = link_record(std::move(header), encrypt_payload(enc_key, plaintext));
  sign_record(r, sign_key);
  return r;
}

VerifyStatus verify_record(const CapsuleRecord& r, const crypto::PublicKey& verify_key) {
  if (crypto::sha256(canonical_encode(r.header, r.ciphertext)) != r.record_hash) return VerifyStatus::kBadHash;
  if (!verify_key.verify(r.record_hash, r.signature)) return VerifyStatus::kBadSignature;
  return VerifyStatus::kOk;
}

Bytes open_record(const CapsuleRecord& r, const crypto::SymmetricKey& enc_key) {
  return crypto::aead_open(enc_key, r.ciphertext);
}

Bytes serialize_record(const CapsuleRecord& r) {
  auto body = canonical_encode(r.header, r.ciphertext);
  ByteWriter w(body.size() + r.record_hash.size() + r.signature.size());
  w.raw(body);
  w.hash(r.record_hash);
  w.raw(r.signature);
  return std::move(w).take();
}

CapsuleRecord parse_record(ByteView bytes) {
  ByteReader rd(bytes);
  CapsuleRecord r;
  r.header = read_header(rd);
  r.ciphertext = rd.blob();
  r.record_hash = rd.hash();
  auto sig = rd.raw(r.signature.size());
  std::copy(sig.begin(), sig.end(), r.signature.begin());
  rd.expect_done();
  return r;
}

void write_record_stream(std::ostream& out, std::span<const CapsuleRecord> records) {
  for (const auto& r : records) {
    auto bytes = serialize_record(r);
    ByteWriter len;
    len.u32(static_cast<std::uint32_t>(bytes.size()));
    out.write(reinterpret_cast<const char*>(len.bytes().data()), 4);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
}

std::vector<CapsuleRecord> read_record_stream(std::istream& in) {
  std::vector<CapsuleRecord> out;
  for (;;) {
    std::array<std::uint8_t, 4> len_buf;
    in.read(reinterpret_cast<char*>(len_buf.data()), 4);
    if (in.gcount() == 0) break;
    if (in.gcount() != 4) throw ParseError("truncated length prefix");
    auto len = ByteReader(len_buf).u32();
    Bytes body(len);
    in.read(reinterpret_cast<char*>(body.data()), len);
    if (static_cast<std::uint32_t>(in.gcount()) != len) throw ParseError("truncated record");
    out.push_back(parse_record(body));
  }
  return out;
}

// ------------------------------------------------------------------ base64

std::string base64_encode(ByteView data) {
  std::string out(4 * ((data.size() + 2) / 3), '\0');
  int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), data.data(), static_cast<int>(data.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

Bytes base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) throw ParseError("base64 length not a multiple of 4");
  std::size_t pad = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    char c = text[i];
    bool alpha = (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '+' || c == '/';
    if (c == '=') {
      if (i + 2 < text.size()) throw ParseError("base64 padding in the middle");
      ++pad;
    } else if (!alpha || pad > 0) {
      throw ParseError("invalid base64 character");
    }
  }
  if (pad > 2) throw ParseError("too much base64 padding");
  Bytes out(text.size() / 4 * 3);
  if (text.empty()) return out;
  int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()),
                          static_cast<int>(text.size()));
  if (n < 0) throw ParseError("invalid base64");
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

// ------------------------------------------------------------- batch CSV

Bytes encode_batch(std::span<const KvEntry> entries) {
  if (entries.empty()) throw std::invalid_argument("encode_batch requires at least one entry");
  std::string out;
  for (const auto& e : entries) {
    if (e.key.empty()) throw std::invalid_argument("empty key");
    out += base64_encode(e.key);
    out += ',';
    out += base64_encode(e.value);
    out += ',';
    out += std::to_string(e.lamport_ts);
    out += '\n';
  }
  return to_bytes(out);
}

std::vector<KvEntry> decode_batch(ByteView csv) {
  std::string_view text(reinterpret_cast<const char*>(csv.data()), csv.size());
  if (text.empty() || text.back() != '\n') throw ParseError("batch must be newline-terminated");
  std::vector<KvEntry> out;
  while (!text.empty()) {
    auto nl = text.find('\n');
    auto line = text.substr(0, nl);
    text.remove_prefix(nl + 1);
    auto c1 = line.find(',');
    auto c2 = c1 == std::string_view::npos ? c1 : line.find(',', c1 + 1);
    if (c2 == std::string_view::npos || line.find(',', c2 + 1) != std::string_view::npos)
      throw ParseError("batch line must have exactly three fields");
    KvEntry e;
    e.key = base64_decode(line.substr(0, c1));
    e.value = base64_decode(line.substr(c1 + 1, c2 - c1 - 1));
    auto ts = line.substr(c2 + 1);
    auto [p, ec] = std::from_chars(ts.data(), ts.data() + ts.size(), e.lamport_ts);
    if (ts.empty() || ec != std::errc{} || p != ts.data() + ts.size()) throw ParseError("bad timestamp field");
    if (e.key.empty()) throw ParseError("empty key");
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace scl
