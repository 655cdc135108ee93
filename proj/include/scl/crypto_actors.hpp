#pragma once

// Crypto actor task pool: a data queue and a higher-priority control queue
// feeding actors that batch, encrypt, hash-link and sign records. Encryption
// and signing run in parallel; linking and emission follow dequeue order so
// the sender's prev_hash chain stays linear.

#include <atomic>
#include <condition_variable>
#include <deque>
#include <functional>
#include <mutex>
#include <optional>
#include <ostream>
#include <thread>

#include "scl/capsule_core.hpp"
#include "scl/enclave_channel.hpp"

namespace scl {

/// A control record to be sealed. prev_hashes is only meaningful for SYNC.
struct ControlMsg {
  MsgType type = MsgType::kRts;
  std::uint64_t lamport_ts = 0;
  std::uint64_t epoch_seq = 0;
  std::vector<Hash> prev_hashes;
  Bytes payload;
};

enum class SubmitResult { kOk, kWouldBlock, kShutDown };
enum class Backpressure { kBlock, kWouldBlock };

/// One unit of actor work: every pending control message plus up to
/// batch_size data tuples.
struct WorkBatch {
  std::uint64_t ticket = 0;
  std::vector<ControlMsg> control;
  std::vector<KvEntry> data;
  bool retry = false;  // items are on their second attempt
};

class TaskPool {
 public:
  static constexpr std::size_t kDefaultCapacity = 1u << 16;

  explicit TaskPool(std::size_t capacity = kDefaultCapacity, Backpressure mode = Backpressure::kBlock)
      : capacity_(capacity), mode_(mode) {}

  SubmitResult submit_data(KvEntry e);
  SubmitResult submit_control(ControlMsg m);

  /// Blocks until work is available; nullopt once shut down and drained.
  std::optional<WorkBatch> take(std::size_t batch_size);
  /// Non-blocking variant.
  std::optional<WorkBatch> try_take(std::size_t batch_size);

  /// Puts failed items back at the front, each to be retried on its own.
  void requeue(std::vector<ControlMsg> control, std::vector<KvEntry> data);

  void shutdown();
  std::size_t data_pending() const;
  std::size_t control_pending() const;

 private:
  template <class T>
  SubmitResult submit(std::deque<T>& q, T item);
  std::optional<WorkBatch> take_locked(std::size_t batch_size);

  std::size_t capacity_;
  Backpressure mode_;
  mutable std::mutex mu_;
  std::condition_variable not_empty_, not_full_;
  std::deque<ControlMsg> control_;
  std::deque<KvEntry> data_;
  std::deque<ControlMsg> retry_control_;
  std::deque<KvEntry> retry_data_;
  std::uint64_t next_ticket_ = 0;
  bool shut_ = false;
};

struct ActorPoolConfig {
  std::size_t num_actors = 4;
  std::size_t batch_size = 100;
};

struct DeadLetter {
  std::optional<KvEntry> data;
  std::optional<ControlMsg> control;
  std::string reason;
};

struct SenderIdentity {
  std::uint64_t sender_id = 0;
  const crypto::SymmetricKey* group_key = nullptr;
  const crypto::PrivateKey* sign_key = nullptr;
};

/// A pool of actor threads draining one TaskPool for one sender.
class ActorPool {
 public:
  using Sink = std::function<void(CapsuleRecord&&)>;
  /// Returns true to make sealing of this batch fail (fault injection).
  using FaultHook = std::function<bool(const WorkBatch&)>;

  ActorPool(TaskPool& pool, ActorPoolConfig cfg, SenderIdentity who, Sink sink, Hash first_parent = kGenesis);
  ~ActorPool();
  ActorPool(const ActorPool&) = delete;
  ActorPool& operator=(const ActorPool&) = delete;

  void set_fault_hook(FaultHook h) { fault_ = std::move(h); }
  void set_epoch(std::uint64_t e) { epoch_.store(e, std::memory_order_relaxed); }
  /// Next DATA record will use this parent (e.g. after adopting a SYNC).
  void set_parent(const Hash& h);

  void start();
  /// Shuts the task pool down, drains it, joins the actors.
  void stop();

  std::uint64_t tuples_sealed() const { return tuples_sealed_.load(); }
  std::uint64_t records_emitted() const { return records_emitted_.load(); }
  std::vector<DeadLetter> dead_letters() const;

 private:
  void run();
  void process(WorkBatch batch);
  void wait_turn(std::uint64_t& counter, std::uint64_t ticket);
  void finish_turn(std::uint64_t& counter);

  TaskPool& pool_;
  ActorPoolConfig cfg_;
  SenderIdentity who_;
  Sink sink_;
  FaultHook fault_;
  std::atomic<std::uint64_t> epoch_{0};
  std::vector<std::thread> threads_;

  std::mutex order_mu_;
  std::condition_variable order_cv_;
  std::uint64_t link_turn_ = 0;
  std::uint64_t emit_turn_ = 0;
  Hash prev_;

  mutable std::mutex dl_mu_;
  std::vector<DeadLetter> dead_;
  std::atomic<std::uint64_t> tuples_sealed_{0};
  std::atomic<std::uint64_t> records_emitted_{0};
};

struct ThroughputRow {
  std::size_t actors = 0;
  std::size_t batch_size = 0;
  std::uint64_t ops = 0;
  double seconds = 0;
  double ops_per_sec() const { return seconds > 0 ? static_cast<double>(ops) / seconds : 0; }
};

/// Put-only microbench: memtable put, pipeline sealing, push into the
/// enclave ring, consumer pop. Wall-clock timed.
ThroughputRow pipeline_throughput(ActorPoolConfig cfg, std::uint64_t ops, std::size_t value_bytes = 100);
void write_throughput_csv(std::ostream& out, const ThroughputRow& r, bool header);

}  // namespace scl
