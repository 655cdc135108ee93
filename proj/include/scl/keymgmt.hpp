#pragma once

// Hierarchical deterministic keys over P-256: owner -> hardened app key ->
// non-hardened per-writer keys. Any holder of the app public node can
// derive every writer's verify key, so key distribution is O(n).

#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "scl/crypto.hpp"

namespace scl {

struct PathStep {
  std::uint32_t index = 0;
  bool hardened = false;
  friend bool operator==(const PathStep&, const PathStep&) = default;
};

using DerivationPath = std::vector<PathStep>;

/// "m/0'/2" <-> path. Throws ParseError on bad syntax or index >= 2^31.
DerivationPath parse_path(std::string_view text);
std::string format_path(const DerivationPath& path);

class NeedsPrivateKey : public std::logic_error {
 public:
  NeedsPrivateKey() : std::logic_error("hardened derivation needs the parent private key") {}
};

struct KeyNode {
  DerivationPath path;
  std::optional<crypto::PrivateKey> private_key;
  crypto::PublicKey public_key;
  std::array<std::uint8_t, 32> chain_code{};

  static KeyNode master_from_seed(ByteView seed);
  /// Same node without the private half.
  KeyNode neutered() const;
  bool has_private() const { return private_key.has_value(); }
};

inline constexpr std::uint32_t kMaxChildIndex = 0x7fffffffu;

KeyNode derive_child(const KeyNode& parent, std::uint32_t index, bool hardened);
KeyNode derive_path(const KeyNode& root, const DerivationPath& path);

/// 65-byte wire form of a public node: compressed point || chain code.
Bytes encode_public_node(const KeyNode& node);
KeyNode decode_public_node(ByteView bytes);

/// Group payload key shared by all writers of one application key.
crypto::SymmetricKey derive_group_key(const KeyNode& app);

struct KeyDelivery {
  enum class Kind { kAppPublicBroadcast, kWriterKey };
  Kind kind;
  std::uint32_t recipient;  // writer index; 0 for the broadcast
};

struct WorkerKeys {
  std::uint32_t index = 0;
  KeyNode node;  // private grandchild
  crypto::SymmetricKey group_key;
};

struct Provisioning {
  std::uint32_t app_index = 0;
  KeyNode app_public;  // neutered hardened child of the owner
  std::vector<WorkerKeys> workers;
  std::vector<KeyDelivery> deliveries;
};

/// App key is a hardened child of `owner`; writers 0..worker_count-1 are its
/// non-hardened children. Records one delivery per writer plus one broadcast.
Provisioning provision_workers(const KeyNode& owner, std::uint32_t app_index, std::uint32_t worker_count);

/// Verify key of writer `writer_index`, computed from public material only.
crypto::PublicKey derive_writer_public(const KeyNode& app_public, std::uint32_t writer_index);

struct RotationBundle {
  Provisioning provisioning;
  Bytes announced_app_public;  // what SYNC reports carry after the switch
};

RotationBundle rotate(const KeyNode& owner, std::uint32_t new_app_index, std::uint32_t worker_count);

/// Verifier-side view of every app-key generation and the epoch at which each
/// took effect. Verify keys are derived lazily and cached.
class KeyRing {
 public:
  explicit KeyRing(KeyNode app_public, std::uint64_t first_epoch = 0);

  /// Registers a rotated app key effective from `first_epoch` on. Epochs must increase.
  void add_generation(KeyNode app_public, std::uint64_t first_epoch);
  bool knows_generation(ByteView encoded_app_public) const;
  std::optional<std::uint64_t> generation_epoch(ByteView encoded_app_public) const;

  /// Key in force at `epoch` for `sender_id`.
  const crypto::PublicKey& verify_key(std::uint64_t sender_id, std::uint64_t epoch) const;
  KeyNode app_public_at(std::uint64_t epoch) const;
  KeyNode current_app_public() const;
  std::size_t generation_count() const;

 private:
  struct Generation {
    std::uint64_t first_epoch;
    KeyNode app_public;
    Bytes encoded;
  };
  const Generation& generation_at(std::uint64_t epoch) const;

  std::vector<Generation> generations_;
  mutable std::mutex mu_;
  mutable std::map<std::pair<std::size_t, std::uint64_t>, crypto::PublicKey> cache_;
};

}  // namespace scl
