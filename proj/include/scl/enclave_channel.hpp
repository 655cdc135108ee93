#pragma once

// Host/enclave boundary model. RingBuffer is a single-producer,
// single-consumer ring of sequence-stamped slots over a preallocated arena;
// BaselineChannel is the slow path (rendezvous plus two copies per message).

#include <atomic>
#include <condition_variable>
#include <cstddef>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <thread>
#include <vector>

#include "scl/bytes.hpp"

namespace scl {

struct RingConfig {
  std::size_t slots = 1024;             // power of two
  std::size_t arena_bytes = 16u << 20;  // split evenly into one chunk per slot
  bool poison_freed = false;            // scribble chunks on pop
  bool check_owner =
#ifdef NDEBUG
      false;
#else
      true;
#endif
};

enum class PushResult { kOk, kFull };

class OwnershipViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class RingBuffer {
 public:
  static constexpr std::uint8_t kPoisonByte = 0xDD;

  explicit RingBuffer(RingConfig cfg = {});
  RingBuffer(const RingBuffer&) = delete;
  RingBuffer& operator=(const RingBuffer&) = delete;

  /// Producer side. Messages larger than chunk_bytes() go out of band.
  PushResult push(ByteView msg);
  /// Spins, then yields, until there is room.
  void push_blocking(ByteView msg);

  /// Consumer side.
  std::optional<Bytes> pop();
  bool pop_into(Bytes& out);

  std::size_t capacity() const { return slots_.size(); }
  std::size_t chunk_bytes() const { return chunk_bytes_; }
  /// Approximate occupancy; exact when called from either endpoint while the other is idle.
  std::size_t size() const;
  std::uint64_t oversize_count() const { return oversize_.load(std::memory_order_relaxed); }
  /// Read-only view of a slot's chunk, for poisoning tests.
  ByteView chunk(std::size_t slot) const { return {arena_.data() + slot * chunk_bytes_, chunk_bytes_}; }

 private:
  struct Slot {
    std::atomic<std::uint64_t> seq{0};
    std::size_t len = 0;
    std::unique_ptr<std::uint8_t[]> spill;  // non-null for oversize messages
  };

  void check(std::atomic<std::thread::id>& owner, const char* role);

  RingConfig cfg_;
  std::size_t mask_;
  std::size_t chunk_bytes_;
  std::vector<std::uint8_t> arena_;
  std::vector<Slot> slots_;
  alignas(64) std::atomic<std::uint64_t> head_{0};
  alignas(64) std::atomic<std::uint64_t> tail_{0};
  std::atomic<std::uint64_t> oversize_{0};
  std::atomic<std::thread::id> producer_{};
  std::atomic<std::thread::id> consumer_{};
};

/// Per message: copy in, hand over under a lock, wait for the consumer to
/// copy out and acknowledge. Models a synchronous boundary crossing.
class BaselineChannel {
 public:
  void send(ByteView msg);
  Bytes receive();

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  Bytes buffer_;
  bool full_ = false;
};

struct BoundaryBench {
  std::size_t msg_bytes = 0;
  std::size_t msgs = 0;
  double ring_ns_per_msg = 0;
  double baseline_ns_per_msg = 0;
};

/// Producer and consumer on separate threads for both channels.
BoundaryBench boundary_bench(std::size_t msgs, std::size_t msg_bytes, RingConfig cfg = {});
/// Rows `channel,msg_bytes,msgs,ns_per_msg`, header included when asked.
void write_bench_csv(std::ostream& out, const BoundaryBench& b, bool header);

}  // namespace scl
