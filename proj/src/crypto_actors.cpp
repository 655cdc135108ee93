#include "scl/crypto_actors.hpp"

#include <chrono>

#include "scl/keymgmt.hpp"
#include "scl/memtable.hpp"

namespace scl {

template <class T>
SubmitResult TaskPool::submit(std::deque<T>& q, T item) {
  std::unique_lock lk(mu_);
  if (shut_) return SubmitResult::kShutDown;
  if (q.size() >= capacity_) {
    if (mode_ == Backpressure::kWouldBlock) return SubmitResult::kWouldBlock;
    not_full_.wait(lk, [&] { return shut_ || q.size() < capacity_; });
    if (shut_) return SubmitResult::kShutDown;
  }
  q.push_back(std::move(item));
  not_empty_.notify_one();
  return SubmitResult::kOk;
}

SubmitResult TaskPool::submit_data(KvEntry e) { return submit(data_, std::move(e)); }
SubmitResult TaskPool::submit_control(ControlMsg m) { return submit(control_, std::move(m)); }

std::optional<WorkBatch> TaskPool::take_locked(std::size_t batch_size) {
  WorkBatch b;
  if (!retry_control_.empty()) {
    b.control.push_back(std::move(retry_control_.front()));
    retry_control_.pop_front();
    b.retry = true;
  } else if (!retry_data_.empty()) {
    b.data.push_back(std::move(retry_data_.front()));
    retry_data_.pop_front();
    b.retry = true;
  } else {
    while (!control_.empty()) {
      b.control.push_back(std::move(control_.front()));
      control_.pop_front();
    }
    const std::size_t n = std::min(batch_size, data_.size());
    for (std::size_t i = 0; i < n; ++i) {
      b.data.push_back(std::move(data_.front()));
      data_.pop_front();
    }
  }
  if (b.control.empty() && b.data.empty()) return std::nullopt;
  b.ticket = next_ticket_++;
  not_full_.notify_all();
  return b;
}

std::optional<WorkBatch> TaskPool::take(std::size_t batch_size) {
  std::unique_lock lk(mu_);
  for (;;) {
    if (auto b = take_locked(batch_size)) return b;
    if (shut_) return std::nullopt;
    not_empty_.wait(lk);
  }
}

std::optional<WorkBatch> TaskPool::try_take(std::size_t batch_size) {
  std::lock_guard lk(mu_);
  return take_locked(batch_size);
}

void TaskPool::requeue(std::vector<ControlMsg> control, std::vector<KvEntry> data) {
  std::lock_guard lk(mu_);
  for (auto it = control.rbegin(); it != control.rend(); ++it) retry_control_.push_front(std::move(*it));
  for (auto it = data.rbegin(); it != data.rend(); ++it) retry_data_.push_front(std::move(*it));
  not_empty_.notify_all();
}

void TaskPool::shutdown() {
  std::lock_guard lk(mu_);
  shut_ = true;
  not_empty_.notify_all();
  not_full_.notify_all();
}

std::size_t TaskPool::data_pending() const {
  std::lock_guard lk(mu_);
  return data_.size() + retry_data_.size();
}

std::size_t TaskPool::control_pending() const {
  std::lock_guard lk(mu_);
  return control_.size() + retry_control_.size();
}

ActorPool::ActorPool(TaskPool& pool, ActorPoolConfig cfg, SenderIdentity who, Sink sink, Hash first_parent)
    : pool_(pool), cfg_(cfg), who_(who), sink_(std::move(sink)), prev_(first_parent) {
  if (cfg.num_actors == 0 || cfg.batch_size == 0) throw std::invalid_argument("actors and batch size must be >= 1");
  if (!who.group_key || !who.sign_key) throw std::invalid_argument("sender identity needs both keys");
}

ActorPool::~ActorPool() { stop(); }

void ActorPool::set_parent(const Hash& h) {
  std::lock_guard lk(order_mu_);
  prev_ = h;
}

void ActorPool::start() {
  for (std::size_t i = 0; i < cfg_.num_actors; ++i) threads_.emplace_back([this] { run(); });
}

void ActorPool::stop() {
  pool_.shutdown();
  for (auto& t : threads_)
    if (t.joinable()) t.join();
  threads_.clear();
}

std::vector<DeadLetter> ActorPool::dead_letters() const {
  std::lock_guard lk(dl_mu_);
  return dead_;
}

void ActorPool::run() {
  while (auto b = pool_.take(cfg_.batch_size)) process(std::move(*b));
}

void ActorPool::wait_turn(std::uint64_t& counter, std::uint64_t ticket) {
  std::unique_lock lk(order_mu_);
  order_cv_.wait(lk, [&] { return counter == ticket; });
}

void ActorPool::finish_turn(std::uint64_t& counter) {
  {
    std::lock_guard lk(order_mu_);
    ++counter;
  }
  order_cv_.notify_all();
}

void ActorPool::process(WorkBatch batch) {
  // Encrypt (parallel across actors).
  std::vector<Bytes> control_ct;
  Bytes data_ct;
  std::string failure;
  try {
    if (fault_ && fault_(batch)) throw crypto::CryptoError("injected sealing fault");
    for (const auto& c : batch.control) control_ct.push_back(encrypt_payload(*who_.group_key, c.payload));
    if (!batch.data.empty()) data_ct = encrypt_payload(*who_.group_key, encode_batch(batch.data));
  } catch (const std::exception& e) {
    failure = e.what();
  }

  if (!failure.empty()) {
    // Keep the ticket sequence moving before handing the items back.
    wait_turn(link_turn_, batch.ticket);
    finish_turn(link_turn_);
    wait_turn(emit_turn_, batch.ticket);
    finish_turn(emit_turn_);
    if (batch.retry) {
      std::lock_guard lk(dl_mu_);
      for (auto& c : batch.control) dead_.push_back({std::nullopt, std::move(c), failure});
      for (auto& d : batch.data) dead_.push_back({std::move(d), std::nullopt, failure});
    } else {
      pool_.requeue(std::move(batch.control), std::move(batch.data));
    }
    return;
  }

  // Link in ticket order.
  std::vector<CapsuleRecord> out;
  wait_turn(link_turn_, batch.ticket);
  {
    const auto epoch = epoch_.load(std::memory_order_relaxed);
    for (std::size_t i = 0; i < batch.control.size(); ++i) {
      auto& c = batch.control[i];
      RecordHeader h{who_.sender_id, c.lamport_ts, c.epoch_seq, c.type,
                     c.type == MsgType::kSync ? std::move(c.prev_hashes) : std::vector<Hash>{}};
      out.push_back(link_record(std::move(h), std::move(control_ct[i])));
    }
    if (!batch.data.empty()) {
      std::lock_guard lk(order_mu_);
      RecordHeader h{who_.sender_id, batch.data.back().lamport_ts, epoch, MsgType::kData, {prev_}};
      out.push_back(link_record(std::move(h), std::move(data_ct)));
      prev_ = out.back().record_hash;
    }
  }
  finish_turn(link_turn_);

  // Sign (parallel), emit in ticket order.
  for (auto& r : out) sign_record(r, *who_.sign_key);
  wait_turn(emit_turn_, batch.ticket);
  for (auto& r : out) sink_(std::move(r));
  records_emitted_ += out.size();
  tuples_sealed_ += batch.data.size();
  finish_turn(emit_turn_);
}

ThroughputRow pipeline_throughput(ActorPoolConfig cfg, std::uint64_t ops, std::size_t value_bytes) {
  using clock = std::chrono::steady_clock;
  auto owner = KeyNode::master_from_seed(Bytes(32, 0x33));
  auto prov = provision_workers(owner, 0, 1);
  const auto& w = prov.workers.front();
  SenderIdentity who{0, &w.group_key, &*w.node.private_key};

  TaskPool pool;
  RingConfig rc;
  rc.check_owner = false;  // emission is serialized by ticket, but from several threads
  RingBuffer ring(rc);
  std::atomic<std::uint64_t> popped{0};
  std::atomic<bool> done{false};
  ActorPool actors(pool, cfg, who, [&](CapsuleRecord&& r) { ring.push_blocking(serialize_record(r)); });

  Memtable mt(0);
  const Bytes value(value_bytes, 'x');
  auto t0 = clock::now();
  std::thread consumer([&] {
    Bytes msg;
    while (!done.load(std::memory_order_acquire)) {
      if (ring.pop_into(msg))
        popped.fetch_add(1, std::memory_order_relaxed);
      else
        std::this_thread::yield();
    }
    while (ring.pop_into(msg)) popped.fetch_add(1, std::memory_order_relaxed);
  });
  actors.start();
  for (std::uint64_t i = 0; i < ops; ++i) {
    auto e = mt.put(to_bytes("user" + std::to_string(i % 1000)), value);
    pool.submit_data(std::move(e));
  }
  actors.stop();
  done.store(true, std::memory_order_release);
  consumer.join();
  ThroughputRow row{cfg.num_actors, cfg.batch_size, actors.tuples_sealed(),
                    std::chrono::duration<double>(clock::now() - t0).count()};
  return row;
}

void write_throughput_csv(std::ostream& out, const ThroughputRow& r, bool header) {
  if (header) out << "actors,batch_size,ops,seconds,ops_per_sec\n";
  out << r.actors << ',' << r.batch_size << ',' << r.ops << ',' << r.seconds << ',' << r.ops_per_sec() << '\n';
}

}  // namespace scl
