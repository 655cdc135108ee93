#pragma once

// A replica's partial DataCapsule DAG. The record SET is the CRDT state:
// merge is set union, so it is commutative, associative and idempotent.
// Records whose parents have not arrived yet are parked as orphans and
// linked as soon as the parents show up.

#include <deque>
#include <functional>
#include <iosfwd>
#include <map>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "scl/capsule_core.hpp"

namespace scl {

/// Maps (sender_id, epoch_seq) to the verify key in force, or nullptr if unknown.
using KeyResolver = std::function<const crypto::PublicKey*(std::uint64_t sender_id, std::uint64_t epoch_seq)>;

KeyResolver resolver_from_map(const std::map<std::uint64_t, crypto::PublicKey>& keys);

class WrongParent : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MergeOutcome {
  std::size_t accepted = 0;    // new records stored (linked or parked)
  std::size_t duplicates = 0;  // already present
  std::size_t orphaned = 0;    // stored but still waiting for a parent
  std::size_t rejected = 0;    // failed verification or not a chain record type
  /// Records that became linked during this call, parents before children.
  std::vector<Hash> newly_linked;

  MergeOutcome& operator+=(const MergeOutcome& o);
};

struct BacktrackResult {
  bool complete = false;
  std::vector<Hash> path;  // newest first, excluding the stop point
  std::set<Hash> missing;
};

struct AuthFailure {
  Hash record_hash;
  std::string reason;
};

struct AuthReport {
  bool valid() const { return failures.empty(); }
  std::size_t records_checked = 0;
  std::vector<AuthFailure> failures;
};

class CapsuleChain {
 public:
  static constexpr std::size_t kDefaultOrphanCap = 10'000;

  explicit CapsuleChain(std::size_t orphan_cap = kDefaultOrphanCap) : orphan_cap_(orphan_cap) {}

  /// Parent a new local DATA record of `sender` must carry: its own head if it
  /// has uncovered writes, otherwise the last adopted SYNC (or genesis).
  Hash expected_parent(std::uint64_t sender) const;

  /// Stores a record produced locally. Throws WrongParent if it does not
  /// follow expected_parent, std::invalid_argument for non-DATA records.
  Hash append_local(CapsuleRecord record);

  /// Verifies each record and unions it in. Only DATA and SYNC records belong
  /// to the chain; other types are rejected.
  MergeOutcome merge(std::span<const CapsuleRecord> incoming, const KeyResolver& keys);
  /// Unions in a record that the caller has already verified (or produced).
  MergeOutcome insert(CapsuleRecord record);

  /// Marks `sync_hash` as the adopted rendezvous point. A local writer is
  /// covered iff its current head is the newest of its records in the
  /// SYNC's ancestry; otherwise it is marked uncovered again. Call only
  /// once the SYNC's ancestry is stored.
  void adopt_sync(const Hash& sync_hash, std::uint64_t epoch_seq,
                  const std::map<std::uint64_t, Hash>& reported_heads);

  /// After reloading a chain, continue `sender`'s writes from its stored head.
  void resume_writer(std::uint64_t sender);

  /// Walks prev pointers from `from` until `until_sync`, any SYNC record or
  /// genesis. Reports the unresolvable hashes if the walk breaks.
  BacktrackResult backtrack(const Hash& from, const Hash& until_sync) const;

  /// Every hash reachable from `roots` (through SYNC fan-in as well) that is
  /// not stored, stopping at records already marked closed.
  std::set<Hash> missing_ancestors(std::span<const Hash> roots) const;
  /// Records the full ancestry of `roots` as complete. Call only when
  /// missing_ancestors(roots) is empty.
  void mark_closed(std::span<const Hash> roots);

  bool contains(const Hash& h) const;
  const CapsuleRecord* find(const Hash& h) const;
  bool is_linked(const Hash& h) const { return h == kGenesis || linked_.contains(h); }

  std::set<Hash> record_set() const;
  std::size_t size() const { return records_.size(); }
  std::size_t orphan_count() const { return orphans_.size(); }
  std::size_t orphans_dropped() const { return orphans_dropped_; }

  std::optional<Hash> head(std::uint64_t sender) const;
  const std::map<std::uint64_t, Hash>& heads() const { return head_hash_; }
  bool has_uncovered_writes(std::uint64_t sender) const { return dirty_.contains(sender); }
  const Hash& last_sync() const { return last_sync_; }
  std::uint64_t last_sync_epoch() const { return last_sync_epoch_; }

  /// All stored records, parents before children where the parent is stored.
  std::vector<const CapsuleRecord*> topological_order() const;

  /// Length-prefixed canonical record stream, topologically ordered.
  void dump(std::ostream& out) const;
  static CapsuleChain load(std::istream& in, const KeyResolver& keys, MergeOutcome* outcome = nullptr);

  friend bool same_records(const CapsuleChain& a, const CapsuleChain& b) { return a.record_set() == b.record_set(); }

 private:
  void link(const Hash& h, MergeOutcome& out);
  void park(const Hash& h);
  void update_head(const CapsuleRecord& r);

  std::size_t orphan_cap_;
  std::unordered_map<Hash, CapsuleRecord, HashHasher> records_;
  std::unordered_set<Hash, HashHasher> linked_;
  std::unordered_set<Hash, HashHasher> orphans_;
  std::deque<Hash> orphan_order_;
  std::unordered_map<Hash, std::vector<Hash>, HashHasher> waiting_on_;
  std::size_t orphans_dropped_ = 0;

  std::map<std::uint64_t, Hash> head_hash_;
  std::map<std::uint64_t, std::uint64_t> head_ts_;
  std::set<std::uint64_t> dirty_;
  std::set<std::uint64_t> local_;  // senders that append here
  // Per SYNC: newest record of each sender in its ancestry, as (ts, hash).
  using Cover = std::map<std::uint64_t, std::pair<std::uint64_t, Hash>>;
  const Cover& cover_of(const Hash& sync_hash);
  std::unordered_map<Hash, Cover, HashHasher> covers_;
  Hash last_sync_ = kGenesis;
  std::uint64_t last_sync_epoch_ = 0;
  std::unordered_set<Hash, HashHasher> closed_;
};

/// Third-party audit: every record's hash and signature plus every prev
/// link, with no access to the payload key. Collects all failures.
AuthReport authenticate_chain(const CapsuleChain& chain, const KeyResolver& keys);

}  // namespace scl
