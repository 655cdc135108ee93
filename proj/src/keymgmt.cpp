#include "scl/keymgmt.hpp"

#include <charconv>

#include "scl/bytes.hpp"

namespace scl {

DerivationPath parse_path(std::string_view text) {
  if (text.substr(0, 1) != "m") throw ParseError("path must start with m");
  text.remove_prefix(1);
  DerivationPath out;
  while (!text.empty()) {
    if (text.front() != '/') throw ParseError("expected '/' in path");
    text.remove_prefix(1);
    auto end = text.find('/');
    auto tok = text.substr(0, end);
    text = end == std::string_view::npos ? std::string_view{} : text.substr(end);
    PathStep step;
    if (!tok.empty() && tok.back() == '\'') {
      step.hardened = true;
      tok.remove_suffix(1);
    }
    auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), step.index);
    if (tok.empty() || ec != std::errc{} || p != tok.data() + tok.size() || step.index > kMaxChildIndex)
      throw ParseError("bad path component");
    out.push_back(step);
  }
  return out;
}

std::string format_path(const DerivationPath& path) {
  std::string s = "m";
  for (const auto& st : path) {
    s += '/';
    s += std::to_string(st.index);
    if (st.hardened) s += '\'';
  }
  return s;
}

KeyNode KeyNode::master_from_seed(ByteView seed) {
  static constexpr std::string_view kTag = "scl/hd-master";
  auto i = crypto::hmac_sha512(ByteView(reinterpret_cast<const std::uint8_t*>(kTag.data()), kTag.size()), seed);
  auto k = crypto::reduce_scalar(ByteView(i.data(), 32));
  if (crypto::scalar_is_zero(k)) throw crypto::CryptoError("degenerate seed");
  KeyNode node;
  node.private_key.emplace(k);
  node.public_key = node.private_key->public_key();
  std::copy(i.begin() + 32, i.end(), node.chain_code.begin());
  return node;
}

KeyNode KeyNode::neutered() const {
  KeyNode n;
  n.path = path;
  n.public_key = public_key;
  n.chain_code = chain_code;
  return n;
}

KeyNode derive_child(const KeyNode& parent, std::uint32_t index, bool hardened) {
  if (index > kMaxChildIndex) throw std::invalid_argument("child index must be < 2^31");
  if (hardened && !parent.has_private()) throw NeedsPrivateKey();

  ByteWriter data(1 + 33 + 4);
  if (hardened) {
    data.u8(0);
    data.raw(parent.private_key->scalar());
    data.u32(index | 0x80000000u);
  } else {
    data.raw(parent.public_key.compressed());
    data.u32(index);
  }
  auto i = crypto::hmac_sha512(parent.chain_code, data.bytes());
  auto tweak = crypto::reduce_scalar(ByteView(i.data(), 32));

  KeyNode child;
  child.path = parent.path;
  child.path.push_back({index, hardened});
  std::copy(i.begin() + 32, i.end(), child.chain_code.begin());
  if (parent.has_private()) {
    child.private_key.emplace(parent.private_key->add_tweak(tweak));
    child.public_key = child.private_key->public_key();
  } else {
    child.public_key = parent.public_key.add_tweak(tweak);
  }
  return child;
}

KeyNode derive_path(const KeyNode& root, const DerivationPath& path) {
  KeyNode node = root;
  for (const auto& st : path) node = derive_child(node, st.index, st.hardened);
  return node;
}

Bytes encode_public_node(const KeyNode& node) {
  ByteWriter w(65);
  w.raw(node.public_key.compressed());
  w.raw(node.chain_code);
  return std::move(w).take();
}

KeyNode decode_public_node(ByteView bytes) {
  ByteReader r(bytes);
  crypto::CompressedPoint p;
  auto pv = r.raw(p.size());
  std::copy(pv.begin(), pv.end(), p.begin());
  KeyNode n;
  try {
    n.public_key = crypto::PublicKey(p);
  } catch (const crypto::CryptoError&) {
    throw ParseError("invalid public key point");
  }
  auto cc = r.raw(32);
  std::copy(cc.begin(), cc.end(), n.chain_code.begin());
  r.expect_done();
  return n;
}

crypto::SymmetricKey derive_group_key(const KeyNode& app) {
  if (!app.has_private()) throw NeedsPrivateKey();
  static constexpr std::string_view kTag = "scl/group-key";
  crypto::SymmetricKey k;
  k.bytes = crypto::hmac_sha256(app.private_key->scalar(),
                                ByteView(reinterpret_cast<const std::uint8_t*>(kTag.data()), kTag.size()));
  return k;
}

Provisioning provision_workers(const KeyNode& owner, std::uint32_t app_index, std::uint32_t worker_count) {
  if (worker_count == 0) throw std::invalid_argument("worker_count must be >= 1");
  auto app = derive_child(owner, app_index, /*hardened=*/true);
  auto group = derive_group_key(app);

  Provisioning p;
  p.app_index = app_index;
  p.app_public = app.neutered();
  p.deliveries.push_back({KeyDelivery::Kind::kAppPublicBroadcast, 0});
  for (std::uint32_t w = 0; w < worker_count; ++w) {
    p.workers.push_back({w, derive_child(app, w, /*hardened=*/false), group});
    p.deliveries.push_back({KeyDelivery::Kind::kWriterKey, w});
  }
  return p;
}

crypto::PublicKey derive_writer_public(const KeyNode& app_public, std::uint32_t writer_index) {
  return derive_child(app_public.neutered(), writer_index, /*hardened=*/false).public_key;
}

RotationBundle rotate(const KeyNode& owner, std::uint32_t new_app_index, std::uint32_t worker_count) {
  RotationBundle b;
  b.provisioning = provision_workers(owner, new_app_index, worker_count);
  b.announced_app_public = encode_public_node(b.provisioning.app_public);
  return b;
}

// ------------------------------------------------------------------ KeyRing

KeyRing::KeyRing(KeyNode app_public, std::uint64_t first_epoch) {
  add_generation(std::move(app_public), first_epoch);
}

void KeyRing::add_generation(KeyNode app_public, std::uint64_t first_epoch) {
  std::lock_guard lk(mu_);
  if (!generations_.empty() && first_epoch <= generations_.back().first_epoch)
    throw std::invalid_argument("key generations must start at increasing epochs");
  auto neutered = app_public.neutered();
  auto encoded = encode_public_node(neutered);
  generations_.push_back({first_epoch, std::move(neutered), std::move(encoded)});
}

bool KeyRing::knows_generation(ByteView encoded_app_public) const {
  return generation_epoch(encoded_app_public).has_value();
}

std::optional<std::uint64_t> KeyRing::generation_epoch(ByteView encoded_app_public) const {
  std::lock_guard lk(mu_);
  for (const auto& g : generations_)
    if (std::equal(g.encoded.begin(), g.encoded.end(), encoded_app_public.begin(), encoded_app_public.end()))
      return g.first_epoch;
  return std::nullopt;
}

const KeyRing::Generation& KeyRing::generation_at(std::uint64_t epoch) const {
  const Generation* g = &generations_.front();
  for (const auto& cand : generations_)
    if (cand.first_epoch <= epoch) g = &cand;
  return *g;
}

KeyNode KeyRing::app_public_at(std::uint64_t epoch) const {
  std::lock_guard lk(mu_);
  return generation_at(epoch).app_public;
}

KeyNode KeyRing::current_app_public() const {
  std::lock_guard lk(mu_);
  return generations_.back().app_public;
}

std::size_t KeyRing::generation_count() const {
  std::lock_guard lk(mu_);
  return generations_.size();
}

const crypto::PublicKey& KeyRing::verify_key(std::uint64_t sender_id, std::uint64_t epoch) const {
  if (sender_id > kMaxChildIndex) throw std::invalid_argument("sender_id outside the writer index range");
  std::lock_guard lk(mu_);
  const auto& g = generation_at(epoch);
  auto gen = static_cast<std::size_t>(&g - generations_.data());
  auto key = std::make_pair(gen, sender_id);
  auto it = cache_.find(key);
  if (it == cache_.end())
    it = cache_.emplace(key, derive_writer_public(g.app_public, static_cast<std::uint32_t>(sender_id))).first;
  return it->second;
}

}  // namespace scl
