#include "scl/enclave_channel.hpp"

#include <chrono>
#include <cstring>

namespace scl {

namespace {
bool is_pow2(std::size_t x) { return x != 0 && (x & (x - 1)) == 0; }

void backoff(unsigned& spins) {
  if (++spins < 64) return;
  std::this_thread::yield();
}
}  // namespace

RingBuffer::RingBuffer(RingConfig cfg) : cfg_(cfg), slots_(cfg.slots) {
  if (!is_pow2(cfg.slots)) throw std::invalid_argument("ring slots must be a power of two");
  mask_ = cfg.slots - 1;
  chunk_bytes_ = cfg.arena_bytes / cfg.slots;
  arena_.assign(chunk_bytes_ * cfg.slots, 0);
  for (std::size_t i = 0; i < slots_.size(); ++i) slots_[i].seq.store(i, std::memory_order_relaxed);
}

void RingBuffer::check(std::atomic<std::thread::id>& owner, const char* role) {
  if (!cfg_.check_owner) return;
  const auto me = std::this_thread::get_id();
  std::thread::id expected{};
  if (owner.compare_exchange_strong(expected, me)) return;
  if (expected != me) throw OwnershipViolation(std::string("second ") + role + " on a single-" + role + " ring");
}

PushResult RingBuffer::push(ByteView msg) {
  check(producer_, "producer");
  const auto pos = head_.load(std::memory_order_relaxed);
  auto& s = slots_[pos & mask_];
  if (s.seq.load(std::memory_order_acquire) != pos) return PushResult::kFull;
  s.len = msg.size();
  if (msg.size() > chunk_bytes_) {
    s.spill = std::make_unique<std::uint8_t[]>(msg.size());
    std::memcpy(s.spill.get(), msg.data(), msg.size());
    oversize_.fetch_add(1, std::memory_order_relaxed);
  } else if (!msg.empty()) {
    std::memcpy(arena_.data() + (pos & mask_) * chunk_bytes_, msg.data(), msg.size());
  }
  s.seq.store(pos + 1, std::memory_order_release);
  head_.store(pos + 1, std::memory_order_relaxed);
  return PushResult::kOk;
}

void RingBuffer::push_blocking(ByteView msg) {
  unsigned spins = 0;
  while (push(msg) == PushResult::kFull) backoff(spins);
}

bool RingBuffer::pop_into(Bytes& out) {
  check(consumer_, "consumer");
  const auto pos = tail_.load(std::memory_order_relaxed);
  const auto idx = pos & mask_;
  auto& s = slots_[idx];
  if (s.seq.load(std::memory_order_acquire) != pos + 1) return false;
  std::uint8_t* chunk = arena_.data() + idx * chunk_bytes_;
  if (s.spill) {
    out.assign(s.spill.get(), s.spill.get() + s.len);
    s.spill.reset();
  } else {
    out.assign(chunk, chunk + s.len);
    if (cfg_.poison_freed) std::memset(chunk, kPoisonByte, chunk_bytes_);
  }
  s.seq.store(pos + slots_.size(), std::memory_order_release);
  tail_.store(pos + 1, std::memory_order_relaxed);
  return true;
}

std::optional<Bytes> RingBuffer::pop() {
  Bytes out;
  if (!pop_into(out)) return std::nullopt;
  return out;
}

std::size_t RingBuffer::size() const {
  return static_cast<std::size_t>(head_.load(std::memory_order_acquire) - tail_.load(std::memory_order_acquire));
}

void BaselineChannel::send(ByteView msg) {
  std::unique_lock lk(mu_);
  cv_.wait(lk, [&] { return !full_; });
  buffer_.assign(msg.begin(), msg.end());
  full_ = true;
  cv_.notify_all();
  cv_.wait(lk, [&] { return !full_; });
}

Bytes BaselineChannel::receive() {
  std::unique_lock lk(mu_);
  cv_.wait(lk, [&] { return full_; });
  Bytes out(buffer_.begin(), buffer_.end());
  full_ = false;
  cv_.notify_all();
  return out;
}

BoundaryBench boundary_bench(std::size_t msgs, std::size_t msg_bytes, RingConfig cfg) {
  using clock = std::chrono::steady_clock;
  BoundaryBench b{msg_bytes, msgs};
  const Bytes payload(msg_bytes, 0x5a);
  cfg.check_owner = false;

  {
    RingBuffer ring(cfg);
    auto t0 = clock::now();
    std::thread consumer([&] {
      Bytes out;
      unsigned spins = 0;
      for (std::size_t got = 0; got < msgs;) {
        if (ring.pop_into(out)) {
          ++got;
          spins = 0;
        } else {
          backoff(spins);
        }
      }
    });
    for (std::size_t i = 0; i < msgs; ++i) ring.push_blocking(payload);
    consumer.join();
    b.ring_ns_per_msg = std::chrono::duration<double, std::nano>(clock::now() - t0).count() / static_cast<double>(msgs);
  }
  {
    BaselineChannel ch;
    auto t0 = clock::now();
    std::thread consumer([&] {
      for (std::size_t i = 0; i < msgs; ++i) (void)ch.receive();
    });
    for (std::size_t i = 0; i < msgs; ++i) ch.send(payload);
    consumer.join();
    b.baseline_ns_per_msg =
        std::chrono::duration<double, std::nano>(clock::now() - t0).count() / static_cast<double>(msgs);
  }
  return b;
}

void write_bench_csv(std::ostream& out, const BoundaryBench& b, bool header) {
  if (header) out << "channel,msg_bytes,msgs,ns_per_msg\n";
  out << "ring," << b.msg_bytes << ',' << b.msgs << ',' << b.ring_ns_per_msg << '\n';
  out << "baseline," << b.msg_bytes << ',' << b.msgs << ',' << b.baseline_ns_per_msg << '\n';
}

}  // namespace scl
