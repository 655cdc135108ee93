#pragma once

// LSM store of the key-value state, kept inside the capsule itself. Filled
// memtables flush whole into L0 as block records; compaction merges a level
// into the next, ten times larger one. Every flush and compaction ends with
// an index checkpoint record, so a crashed instance reloads the newest index
// and replays only the records written after it.

#include <iosfwd>
#include <map>
#include <optional>
#include <set>

#include "scl/capsule_chain.hpp"
#include "scl/crypto_actors.hpp"
#include "scl/memtable.hpp"

namespace scl {

struct DbEntry {
  Bytes key;
  Bytes value;
  std::uint64_t lamport_ts = 0;
  std::uint64_t sender_id = 0;

  friend bool operator==(const DbEntry&, const DbEntry&) = default;
};

/// Store payloads are DATA records whose plaintext opens with a tag line.
/// Plain write batches never start with '#', so the two cannot be confused.
enum class DbTag { kBlock, kIndex, kResult };
std::optional<DbTag> payload_tag(ByteView plaintext);
/// "#block" or "#result" line, then rows b64(key),b64(value),ts,sender.
Bytes encode_rows(DbTag tag, std::span<const DbEntry> rows);
std::vector<DbEntry> decode_rows(ByteView plaintext);

struct BlockDesc {
  Hash hash{};
  Bytes min_key;
  Bytes max_key;
  std::size_t entries = 0;

  friend bool operator==(const BlockDesc&, const BlockDesc&) = default;
};

struct LevelIndex {
  std::vector<std::vector<BlockDesc>> levels;  // L0 newest first
  std::map<std::uint64_t, std::uint64_t> watermarks;  // sender -> highest lamport_ts folded in
  std::uint64_t clock = 0;

  friend bool operator==(const LevelIndex&, const LevelIndex&) = default;
};
Bytes encode_index(const LevelIndex& idx);
LevelIndex decode_index(ByteView plaintext);

struct DbConfig {
  std::size_t memtable_cap = 64;
  std::size_t base_cap = 0;       // entries in L0; 0 means 4 * memtable_cap
  std::size_t block_entries = 0;  // entries per compacted block; 0 means memtable_cap
};

struct DbStats {
  std::uint64_t flushes = 0;
  std::uint64_t compactions = 0;
  std::uint64_t checkpoints = 0;
  std::uint64_t get_block_fetches = 0;
  std::uint64_t apply_block_fetches = 0;
  std::uint64_t applied = 0;
  std::uint64_t rejected_stale = 0;
};

class RecoveryIncomplete : public std::runtime_error {
 public:
  explicit RecoveryIncomplete(std::set<Hash> missing);
  const std::set<Hash>& missing() const { return missing_; }

 private:
  std::set<Hash> missing_;
};

class CapsuleDb {
 public:
  /// Blocks, indexes and get results are appended to `capsule` under `who`.
  CapsuleDb(DbConfig cfg, SenderIdentity who, CapsuleChain& capsule);

  /// Applies every tuple of a verified DATA record written by another
  /// sender. Tagged store payloads are skipped. Returns tuples applied.
  std::size_t ingest(const CapsuleRecord& r);
  /// Lamport-coherent apply, followed by a flush when the memtable is full.
  void apply(const KvEntry& e, std::uint64_t sender);
  /// Freshest stored value: memtable, then L0 newest first, then one block per lower level.
  std::optional<DbEntry> get(ByteView key);

  void flush();
  void compact(std::size_t level);

  /// Seals a "#result" record for a served get.
  const CapsuleRecord& publish_result(const DbEntry& e);
  /// Records appended since the last call, in append order.
  std::vector<CapsuleRecord> take_emitted();
  /// Epoch stamped on records sealed from now on (at least the adopted one).
  void set_epoch(std::uint64_t e) { epoch_ = e; }

  std::size_t capacity(std::size_t level) const;
  std::size_t level_entries(std::size_t level) const;
  const LevelIndex& index() const { return index_; }
  const Hash& checkpoint_hash() const { return checkpoint_; }
  std::size_t memtable_size() const { return mt_.size(); }
  const DbStats& stats() const { return stats_; }
  std::uint64_t sender_id() const { return who_.sender_id; }
  void dump_levels(std::ostream& out) const;

  /// Rebuilds from the newest index checkpoint that verifies, then replays
  /// later DATA records. Throws RecoveryIncomplete if blocks are missing.
  static CapsuleDb recover(DbConfig cfg, SenderIdentity who, CapsuleChain& capsule, const KeyResolver& keys);

 private:
  std::uint64_t epoch_ = 0;
  std::optional<DbEntry> search_levels(ByteView key, std::uint64_t& fetches);
  const std::vector<DbEntry>& block(const Hash& h);
  Hash seal(Bytes payload);
  void checkpoint();
  void ensure_level(std::size_t level);
  void apply_one(const KvEntry& e, std::uint64_t sender);

  DbConfig cfg_;
  SenderIdentity who_;
  CapsuleChain& capsule_;
  Memtable mt_;
  LevelIndex index_;
  Hash checkpoint_ = kGenesis;
  std::map<Hash, std::vector<DbEntry>> decoded_;  // memo of opened blocks
  std::vector<CapsuleRecord> emitted_;
  DbStats stats_;
};

}  // namespace scl
