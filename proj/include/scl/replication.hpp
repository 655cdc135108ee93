#pragma once

// Durability of the capsule: a static leader fans each record out to n = 2f+1
// replicas and reports it durable once w = f+1 of them have persisted it.
// Replica stores are append-only files of length-prefixed records.

#include <chrono>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <thread>
#include <unordered_map>

#include "scl/capsule_core.hpp"

namespace scl {

/// Append-only file of u32-length-prefixed canonical records. A torn tail
/// (partial final record) is truncated on open.
class ReplicaStore {
 public:
  ReplicaStore(std::filesystem::path path, bool sync);
  ~ReplicaStore();
  ReplicaStore(const ReplicaStore&) = delete;
  ReplicaStore& operator=(const ReplicaStore&) = delete;

  /// Persists the record unless already stored. Returns true if it was new.
  bool append(const CapsuleRecord& r);
  bool contains(const Hash& h) const;
  std::optional<CapsuleRecord> find(const Hash& h) const;
  std::set<Hash> hashes() const;
  std::size_t size() const;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  bool sync_;
  int fd_ = -1;
  mutable std::mutex mu_;
  std::unordered_map<Hash, CapsuleRecord, HashHasher> records_;
};

/// Counts distinct replica acks per record; fires once at the quorum.
class QuorumTracker {
 public:
  explicit QuorumTracker(std::size_t w) : w_(w) {}
  /// True exactly when this ack brings the record to w distinct acks.
  bool ack(const Hash& h, std::size_t replica);
  std::size_t acks(const Hash& h) const;
  bool durable(const Hash& h) const { return acks(h) >= w_; }
  std::size_t quorum() const { return w_; }

 private:
  std::size_t w_;
  std::map<Hash, std::set<std::size_t>> acks_;
};

struct ReplicationConfig {
  std::size_t f = 1;
  std::filesystem::path dir;
  bool fsync = true;
  std::chrono::milliseconds timeout{500};
};

struct ReplicateResult {
  enum class Status { kDurable, kTimeout } status = Status::kTimeout;
  std::uint64_t epoch_seq = 0;
  Hash hash{};
  std::size_t acks = 0;
  bool durable() const { return status == Status::kDurable; }
};

struct RecoverReport {
  std::size_t pulled = 0;
  bool degraded = false;  // no live peer answered
};

class ReplicaGroup {
 public:
  explicit ReplicaGroup(ReplicationConfig cfg);
  ~ReplicaGroup();
  ReplicaGroup(const ReplicaGroup&) = delete;
  ReplicaGroup& operator=(const ReplicaGroup&) = delete;

  std::size_t n() const { return replicas_.size(); }
  std::size_t f() const { return cfg_.f; }
  std::size_t w() const { return cfg_.f + 1; }

  /// Blocks until w replicas persisted the record or the timeout expires.
  ReplicateResult replicate(const CapsuleRecord& r);

  /// Crash: the replica stops answering and drops its in-memory state.
  void kill(std::size_t i);
  /// Restart from whatever is on disk.
  void restart(std::size_t i);
  bool alive(std::size_t i) const;
  /// Slows one replica's persist path (tests and benchmarks).
  void set_persist_delay(std::size_t i, std::chrono::milliseconds d);

  /// Pulls every record some live peer has and replica i lacks.
  RecoverReport replica_recover(std::size_t i);

  std::set<Hash> record_set(std::size_t i) const;
  /// From any live replica.
  std::optional<CapsuleRecord> fetch(const Hash& h) const;

 private:
  struct Pending {
    std::mutex mu;
    std::condition_variable cv;
    std::size_t acks = 0;
  };
  struct Replica {
    std::size_t id = 0;
    std::filesystem::path path;
    mutable std::mutex mu;
    std::condition_variable cv;
    std::deque<std::pair<CapsuleRecord, std::shared_ptr<Pending>>> inbox;
    std::unique_ptr<ReplicaStore> store;  // null while crashed
    std::chrono::milliseconds delay{0};
    bool stopping = false;
    std::thread thread;
  };
  void run(Replica& r);

  ReplicationConfig cfg_;
  std::vector<std::unique_ptr<Replica>> replicas_;
};

}  // namespace scl
