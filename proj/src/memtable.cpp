#include "scl/memtable.hpp"

#include <mutex>

namespace scl {

Memtable::Memtable(const Memtable& o) : own_sender_(o.own_sender_) {
  std::shared_lock lk(o.mu_);
  entries_ = o.entries_;
  local_sn_ = o.local_sn_;
}

Memtable& Memtable::operator=(const Memtable& o) {
  if (this == &o) return *this;
  std::scoped_lock lk(mu_, o.mu_);
  own_sender_ = o.own_sender_;
  entries_ = o.entries_;
  local_sn_ = o.local_sn_;
  return *this;
}

KvEntry Memtable::put(ByteView key, ByteView value) {
  if (key.empty()) throw InvalidKey("empty key");
  std::unique_lock lk(mu_);
  const auto ts = ++local_sn_;
  Bytes k(key.begin(), key.end());
  Bytes v(value.begin(), value.end());
  entries_.insert_or_assign(k, StoredValue{v, ts, own_sender_});
  return KvEntry{std::move(k), std::move(v), ts};
}

std::optional<Bytes> Memtable::get(ByteView key) const {
  auto s = lookup(key);
  if (!s) return std::nullopt;
  return std::move(s->value);
}

std::optional<StoredValue> Memtable::lookup(ByteView key) const {
  std::shared_lock lk(mu_);
  auto it = entries_.find(Bytes(key.begin(), key.end()));
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

ApplyResult Memtable::apply_remote(const KvEntry& e, std::uint64_t sender) {
  std::unique_lock lk(mu_);
  local_sn_ = std::max(local_sn_, e.lamport_ts) + 1;
  auto it = entries_.find(e.key);
  if (it != entries_.end() && !newer(e.lamport_ts, sender, it->second.lamport_ts, it->second.sender_id))
    return ApplyResult::kRejectedStale;
  entries_.insert_or_assign(e.key, StoredValue{e.value, e.lamport_ts, sender});
  return ApplyResult::kApplied;
}

std::uint64_t Memtable::local_sn() const {
  std::shared_lock lk(mu_);
  return local_sn_;
}

std::size_t Memtable::size() const {
  std::shared_lock lk(mu_);
  return entries_.size();
}

std::map<Bytes, StoredValue> Memtable::snapshot() const {
  std::shared_lock lk(mu_);
  return {entries_.begin(), entries_.end()};
}

std::map<Bytes, StoredValue> Memtable::take_all() {
  std::unique_lock lk(mu_);
  std::map<Bytes, StoredValue> out(entries_.begin(), entries_.end());
  entries_.clear();
  return out;
}

}  // namespace scl
