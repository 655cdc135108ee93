#pragma once

// Epoch resynchronization on top of the simulated multicast tree.
//
// Every epoch the active coordinator multicasts an RTS, collects one EoE per
// registered writer and multicasts a signed SYNC record whose prev_hashes are
// the reported heads. Replicas close each SYNC's ancestry, asking peers for
// anything missing, before adopting it. Shadow coordinators take over after
// a long SYNC silence.

#include <map>
#include <optional>
#include <set>
#include <vector>

#include "scl/capsule_chain.hpp"
#include "scl/capsuledb.hpp"
#include "scl/memtable.hpp"
#include "scl/replication.hpp"
#include "scl/sim_net.hpp"

namespace scl::proto {

using sim::Micros;
using sim::NodeId;
using sim::kMs;

// ---- payloads ---------------------------------------------------------

struct SyncEntry {
  std::uint64_t sender_id = 0;
  Hash last_record_hash{};
  std::uint64_t lamport_ts = 0;

  friend bool operator==(const SyncEntry&, const SyncEntry&) = default;
};

struct SyncReport {
  std::uint64_t epoch_seq = 0;
  std::vector<SyncEntry> entries;  // sorted by sender_id
  Bytes app_public;                // 65-byte public node in force
  std::vector<std::uint64_t> suspected;

  friend bool operator==(const SyncReport&, const SyncReport&) = default;
  std::map<std::uint64_t, Hash> heads() const;
  /// Sorted, de-duplicated entry hashes: the SYNC record's prev_hashes.
  std::vector<Hash> prev_hashes() const;
};
Bytes encode_sync(const SyncReport& s);
SyncReport decode_sync(ByteView b);

struct EoeMessage {
  std::uint64_t sender_id = 0;
  Hash last_record_hash{};
  std::uint64_t lamport_ts = 0;
  std::uint64_t epoch_seq = 0;

  friend bool operator==(const EoeMessage&, const EoeMessage&) = default;
};
Bytes encode_eoe(const EoeMessage& m);
EoeMessage decode_eoe(std::uint64_t sender, ByteView b);

struct RtsMessage {
  std::uint64_t epoch_seq = 0;
  std::optional<CapsuleRecord> previous_sync;
};
Bytes encode_rts(const RtsMessage& m);
RtsMessage decode_rts(ByteView b);

/// RECOVERY_REQ: tag 0 asks for records by hash, tag 1 asks the store for a key.
struct RecoveryRequest {
  enum class Tag : std::uint8_t { kRecords = 0, kGet = 1 };
  Tag tag = Tag::kRecords;
  std::vector<Hash> hashes;
  Bytes key;
};
Bytes encode_request(const RecoveryRequest& r);
RecoveryRequest decode_request(ByteView b);

Bytes encode_response(std::span<const CapsuleRecord> records);
std::vector<CapsuleRecord> decode_response(ByteView b);

/// On-wire envelope: u8 kind, then a serialized record or a durability ack.
enum class Wire : std::uint8_t { kRecord = 0, kAck = 1 };
Bytes wrap_record(const CapsuleRecord& r);
Bytes wrap_ack(const Hash& h, std::uint64_t replica);

// ---- configuration -----------------------------------------------------

/// Virtual CPU charged per protocol step, in microseconds.
struct CostModel {
  Micros op = 20;            // client request handling at a worker
  Micros seal = 150;         // encrypt + hash + sign one record
  Micros seal_tuple = 1;
  Micros verify = 120;       // verify + decrypt one record
  Micros verify_tuple = 1;
  Micros apply_tuple = 4;
  Micros control = 30;       // RTS/EoE/REQ bookkeeping
  Micros db_get = 2000;
  Micros db_fetch = 300;     // per block fetched by a get
  Micros db_ingest_tuple = 5;
  Micros persist = 500;      // durability replica write + fsync
};

struct ProtocolConfig {
  Micros epoch = 50 * kMs;
  std::uint64_t window = 1;      // freshness window W, in epochs
  int retry_budget = 3;          // recovery rounds per epoch
  Micros recovery_retry = 5 * kMs;
  double failover_mult = 3.0;    // shadow silence, in epochs
  std::size_t batch_size = 10;
  Micros batch_timeout = 5 * kMs;
  Micros get_timeout = 20 * kMs;
  bool cache_gets = true;
  std::size_t replication_f = 0;  // 0: replication off
  std::size_t max_inflight = 4;   // undurable records per worker
  Micros replication_resend = 20 * kMs;
  DbConfig db;
  CostModel cost;
};

/// Who is who. sender ids are key indices; node ids are sim leaves.
struct Directory {
  std::map<std::uint64_t, NodeId> node_of;
  std::set<std::uint64_t> writers;       // must answer RTS
  std::set<std::uint64_t> coordinators;  // may sign SYNC/RTS
  std::optional<std::uint64_t> capsuledb;
  std::vector<std::uint64_t> replicas;
};

struct SyncEvent {
  Micros t = 0;
  std::uint64_t epoch_seq = 0;
  std::uint64_t coordinator = 0;
  std::size_t suspected = 0;
};

struct ProtocolMetrics {
  std::uint64_t stale_drops = 0;
  std::uint64_t rejected = 0;
  std::uint64_t recovery_requests = 0;
  std::uint64_t recovered = 0;        // records accepted from solicited responses
  std::uint64_t degraded_rounds = 0;  // retry budget exhausted
  std::uint64_t records_sealed = 0;   // DATA records from workers
  std::uint64_t get_timeouts = 0;
  std::uint64_t durable_records = 0;
  std::vector<SyncEvent> syncs;

  std::uint64_t ops_done = 0;
  Micros first_issue = -1;
  Micros last_done = 0;
  std::vector<Micros> latencies;
};

/// Every put issued, for the brute-force coherence oracle.
struct UpdateLog {
  std::vector<DbEntry> updates;
};

struct Context {
  sim::SimNet& net;
  ProtocolConfig cfg;
  Directory dir;
  KeyResolver keys;
  crypto::SymmetricKey group;
  Bytes app_public;
  ProtocolMetrics metrics;
  UpdateLog log;

  Context(sim::SimNet& n, ProtocolConfig c) : net(n), cfg(std::move(c)) {}
  bool is_coordinator(std::uint64_t s) const { return dir.coordinators.contains(s); }
};

// ---- nodes ---------------------------------------------------------------

/// Anything holding a capsule replica: answers RTS, closes SYNCs, recovers.
class ReplicaNode : public sim::Endpoint {
 public:
  ReplicaNode(Context& ctx, NodeId node, std::uint64_t sender, const crypto::PrivateKey& sk);

  void on_message(NodeId from, const Bytes& msg) override;
  void on_timer(std::uint64_t tag) override;

  const CapsuleChain& chain() const { return chain_; }
  CapsuleChain& chain() { return chain_; }
  std::uint64_t sender_id() const { return me_; }
  NodeId node() const { return node_; }
  std::uint64_t current_epoch() const { return current_epoch_; }
  std::uint64_t adopted_epoch() const { return chain_.last_sync_epoch(); }
  bool degraded() const { return degraded_; }
  std::uint64_t stale_drops() const { return stale_drops_; }
  /// Whether some held SYNC is still waiting for ancestors.
  bool recovering() const { return !open_syncs_.empty(); }

  /// Freshness: stale iff epoch_seq < current_epoch - W.
  bool stale(const CapsuleRecord& r) const;
  /// Feeds records through the same path as multicast deliveries.
  void deliver(std::span<const CapsuleRecord> records, bool solicited = false);

 protected:
  enum TimerKind : std::uint64_t { kRetry = 1, kTick, kBatch, kGetTimeout, kResend, kFirstCustom };
  static std::uint64_t tag(std::uint64_t kind, std::uint64_t gen = 0) { return kind | (gen << 8); }

  virtual void on_accepted(const CapsuleRecord&) {}
  virtual void on_linked(const CapsuleRecord&) {}
  virtual void on_rts(NodeId from, std::uint64_t epoch);
  virtual void on_get_request(NodeId, const Bytes&) {}
  virtual void on_ack(const Hash&, std::uint64_t) {}
  virtual void on_custom_timer(std::uint64_t) {}

  CapsuleRecord seal(MsgType type, std::uint64_t ts, std::vector<Hash> prevs, ByteView payload);
  void send_eoe(NodeId to, std::uint64_t epoch);
  Micros done_time() const;

  Context& ctx_;
  NodeId node_;
  std::uint64_t me_;
  const crypto::PrivateKey& sk_;
  CapsuleChain chain_;
  std::uint64_t current_epoch_ = 0;

 private:
  void handle_record(NodeId from, CapsuleRecord r);
  void consider_sync(const CapsuleRecord& r);
  void try_close();
  std::set<Hash> close_syncs();
  void request(const std::set<Hash>& hashes);
  void answer_request(NodeId from, const CapsuleRecord& r);

  std::map<Hash, std::uint64_t> open_syncs_;  // SYNCs whose ancestry is not closed yet
  std::set<Hash> requested_;
  int rounds_ = 0;
  bool retry_armed_ = false;
  bool degraded_ = false;
  bool progressed_ = false;
  std::uint64_t stale_drops_ = 0;
};

enum class OpKind { kPut, kGet };
struct Op {
  OpKind kind = OpKind::kPut;
  std::string key;
  Bytes value;
};

class WorkerNode : public ReplicaNode {
 public:
  WorkerNode(Context& ctx, NodeId node, std::uint64_t sender, const crypto::PrivateKey& sk, std::vector<Op> ops);

  void start();
  const Memtable& memtable() const { return mt_; }
  bool finished() const { return done_ == ops_.size(); }
  std::size_t ops_done() const { return done_; }
  std::uint64_t mutations() const { return mutations_; }

 protected:
  void on_accepted(const CapsuleRecord& r) override;
  void on_rts(NodeId from, std::uint64_t epoch) override;
  void on_ack(const Hash& h, std::uint64_t replica) override;
  void on_custom_timer(std::uint64_t tag) override;

 private:
  bool blocked() const;
  void tick();
  void seal_batch();
  void send_get();
  void complete(std::size_t n, Micros issued);
  void schedule_tick();

  struct Inflight {
    std::vector<Micros> issued;
    CapsuleRecord record;
  };

  Memtable mt_;
  std::vector<Op> ops_;
  std::size_t next_ = 0;
  std::size_t done_ = 0;
  std::vector<KvEntry> batch_;
  std::vector<Micros> batch_issued_;
  std::uint64_t batch_gen_ = 0;
  bool batch_armed_ = false;
  bool tick_armed_ = false;
  std::optional<std::pair<Bytes, Micros>> awaiting_;  // key, issue time
  std::uint64_t get_gen_ = 0;
  int get_attempts_ = 0;
  std::map<Hash, Inflight> inflight_;
  QuorumTracker quorum_;
  bool resend_armed_ = false;
  std::uint64_t mutations_ = 0;
};

class DbNode : public ReplicaNode {
 public:
  DbNode(Context& ctx, NodeId node, std::uint64_t sender, const crypto::PrivateKey& sk);

  CapsuleDb& db() { return db_; }
  const CapsuleDb& db() const { return db_; }
  std::uint64_t gets_served() const { return gets_; }

 protected:
  void on_linked(const CapsuleRecord& r) override;
  void on_get_request(NodeId from, const Bytes& key) override;

 private:
  void publish();

  SenderIdentity who_;
  CapsuleDb db_;
  std::uint64_t gets_ = 0;
};

/// Durability replica: persists every DATA record it hears and acks the writer.
class DurabilityNode : public sim::Endpoint {
 public:
  DurabilityNode(Context& ctx, NodeId node, std::uint64_t sender, const crypto::PrivateKey& sk);

  void on_message(NodeId from, const Bytes& msg) override;
  void on_timer(std::uint64_t) override {}
  std::size_t stored() const { return store_.size(); }
  bool holds(const Hash& h) const { return store_.contains(h); }

 private:
  Context& ctx_;
  NodeId node_;
  std::uint64_t me_;
  const crypto::PrivateKey& sk_;
  std::map<Hash, CapsuleRecord> store_;
};

class CoordinatorNode : public sim::Endpoint {
 public:
  /// rank 0 starts active; rank k > 0 waits (failover_mult + k - 1) epochs of silence.
  CoordinatorNode(Context& ctx, NodeId node, std::uint64_t sender, const crypto::PrivateKey& sk, std::size_t rank);

  void on_message(NodeId from, const Bytes& msg) override;
  void on_timer(std::uint64_t tag) override;

  void start();
  /// After a crash: volatile state is gone, come back as a shadow.
  void restart();

  bool active() const { return active_; }
  std::uint64_t last_seq() const { return last_seq_; }
  std::uint64_t sender_id() const { return me_; }
  std::size_t emitted() const { return emitted_; }
  const std::set<std::uint64_t>& suspected() const { return suspected_; }

 private:
  enum : std::uint64_t { kEpoch = 1, kRerequest, kCollectTimeout, kWatch };
  std::uint64_t tag(std::uint64_t kind) const { return kind | (gen_ << 8); }

  void start_epoch();
  void emit_sync();
  void arm_watch();
  void demote();
  void observe_sync(const CapsuleRecord& r);
  Micros silence() const;

  Context& ctx_;
  NodeId node_;
  std::uint64_t me_;
  const crypto::PrivateKey& sk_;
  std::size_t rank_;
  bool active_ = false;
  std::uint64_t gen_ = 0;

  std::uint64_t last_seq_ = 0;  // highest SYNC seq emitted or observed
  std::uint64_t emitted_seq_ = 0;
  std::optional<CapsuleRecord> last_sync_;
  std::map<std::uint64_t, SyncEntry> entries_;
  Micros last_sync_time_ = 0;
  std::map<Hash, CapsuleRecord> syncs_;

  bool collecting_ = false;
  std::uint64_t collect_seq_ = 0;
  std::map<std::uint64_t, SyncEntry> eoe_;
  std::set<std::uint64_t> suspected_;
  std::size_t emitted_ = 0;
};

}  // namespace scl::proto
