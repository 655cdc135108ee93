#pragma once

// Plaintext key-value cache of one replica. Values are ordered by
// (lamport_ts, sender_id); higher sender wins a timestamp tie.

#include <map>
#include <optional>
#include <shared_mutex>
#include <stdexcept>

#include "scl/capsule_core.hpp"

namespace scl {

class InvalidKey : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct StoredValue {
  Bytes value;
  std::uint64_t lamport_ts = 0;
  std::uint64_t sender_id = 0;

  friend bool operator==(const StoredValue&, const StoredValue&) = default;
};

enum class ApplyResult { kApplied, kRejectedStale };

/// True iff (ts_a, sender_a) orders after (ts_b, sender_b).
inline bool newer(std::uint64_t ts_a, std::uint64_t sender_a, std::uint64_t ts_b, std::uint64_t sender_b) {
  return ts_a != ts_b ? ts_a > ts_b : sender_a > sender_b;
}

class Memtable {
 public:
  explicit Memtable(std::uint64_t own_sender) : own_sender_(own_sender) {}
  Memtable(const Memtable& o);
  Memtable& operator=(const Memtable& o);

  /// Stamps with the next local sequence number. Throws InvalidKey on an empty key.
  KvEntry put(ByteView key, ByteView value);
  std::optional<Bytes> get(ByteView key) const;
  std::optional<StoredValue> lookup(ByteView key) const;

  /// Clock rule: local_sn = max(local_sn, e.lamport_ts) + 1 whether or not
  /// the entry wins.
  ApplyResult apply_remote(const KvEntry& e, std::uint64_t sender);

  std::uint64_t local_sn() const;
  std::uint64_t own_sender() const { return own_sender_; }
  std::size_t size() const;
  std::map<Bytes, StoredValue> snapshot() const;
  /// Drops every entry but keeps the clock (used after a flush).
  std::map<Bytes, StoredValue> take_all();

  /// Key-for-key equality of contents; clocks are not compared.
  friend bool same_contents(const Memtable& a, const Memtable& b) { return a.snapshot() == b.snapshot(); }

 private:
  std::uint64_t own_sender_;
  mutable std::shared_mutex mu_;
  std::map<Bytes, StoredValue, std::less<>> entries_;
  std::uint64_t local_sn_ = 0;
};

}  // namespace scl
