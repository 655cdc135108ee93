#include "scl/replication.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <fstream>

namespace scl {

namespace {
void write_all(int fd, const std::uint8_t* p, std::size_t n) {
  while (n > 0) {
    auto w = ::write(fd, p, n);
    if (w < 0) {
      if (errno == EINTR) continue;
      throw std::runtime_error(std::string("replica write failed: ") + std::strerror(errno));
    }
    p += w;
    n -= static_cast<std::size_t>(w);
  }
}
}  // namespace

ReplicaStore::ReplicaStore(std::filesystem::path path, bool sync) : path_(std::move(path)), sync_(sync) {
  std::uintmax_t good = 0;
  if (std::filesystem::exists(path_)) {
    std::ifstream in(path_, std::ios::binary);
    Bytes buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::size_t pos = 0;
    while (pos + 4 <= buf.size()) {
      std::uint32_t len = (std::uint32_t(buf[pos]) << 24) | (std::uint32_t(buf[pos + 1]) << 16) |
                          (std::uint32_t(buf[pos + 2]) << 8) | buf[pos + 3];
      if (pos + 4 + len > buf.size()) break;
      try {
        auto r = parse_record(ByteView(buf.data() + pos + 4, len));
        records_.emplace(r.record_hash, std::move(r));
      } catch (const ParseError&) {
        break;
      }
      pos += 4 + len;
      good = pos;
    }
  }
  fd_ = ::open(path_.c_str(), O_WRONLY | O_CREAT, 0644);
  if (fd_ < 0) throw std::runtime_error("cannot open replica store " + path_.string());
  if (::ftruncate(fd_, static_cast<off_t>(good)) != 0 || ::lseek(fd_, 0, SEEK_END) < 0) {
    ::close(fd_);
    throw std::runtime_error("cannot prepare replica store " + path_.string());
  }
}

ReplicaStore::~ReplicaStore() {
  if (fd_ >= 0) ::close(fd_);
}

bool ReplicaStore::append(const CapsuleRecord& r) {
  std::lock_guard lk(mu_);
  if (records_.contains(r.record_hash)) return false;
  auto wire = serialize_record(r);
  ByteWriter w(wire.size() + 4);
  w.u32(static_cast<std::uint32_t>(wire.size()));
  w.raw(wire);
  write_all(fd_, w.bytes().data(), w.bytes().size());
  if (sync_ && ::fsync(fd_) != 0) throw std::runtime_error("fsync failed on " + path_.string());
  records_.emplace(r.record_hash, r);
  return true;
}

bool ReplicaStore::contains(const Hash& h) const {
  std::lock_guard lk(mu_);
  return records_.contains(h);
}

std::optional<CapsuleRecord> ReplicaStore::find(const Hash& h) const {
  std::lock_guard lk(mu_);
  auto it = records_.find(h);
  if (it == records_.end()) return std::nullopt;
  return it->second;
}

std::set<Hash> ReplicaStore::hashes() const {
  std::lock_guard lk(mu_);
  std::set<Hash> out;
  for (const auto& [h, _] : records_) out.insert(h);
  return out;
}

std::size_t ReplicaStore::size() const {
  std::lock_guard lk(mu_);
  return records_.size();
}

bool QuorumTracker::ack(const Hash& h, std::size_t replica) {
  auto& s = acks_[h];
  const bool before = s.size() >= w_;
  s.insert(replica);
  return !before && s.size() >= w_;
}

std::size_t QuorumTracker::acks(const Hash& h) const {
  auto it = acks_.find(h);
  return it == acks_.end() ? 0 : it->second.size();
}

ReplicaGroup::ReplicaGroup(ReplicationConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.dir.empty()) throw std::invalid_argument("replication needs a directory");
  std::filesystem::create_directories(cfg_.dir);
  const std::size_t n = 2 * cfg_.f + 1;
  for (std::size_t i = 0; i < n; ++i) {
    auto r = std::make_unique<Replica>();
    r->id = i;
    r->path = cfg_.dir / ("replica-" + std::to_string(i) + ".log");
    r->store = std::make_unique<ReplicaStore>(r->path, cfg_.fsync);
    replicas_.push_back(std::move(r));
  }
  for (auto& r : replicas_) r->thread = std::thread([this, p = r.get()] { run(*p); });
}

ReplicaGroup::~ReplicaGroup() {
  for (auto& r : replicas_) {
    {
      std::lock_guard lk(r->mu);
      r->stopping = true;
    }
    r->cv.notify_all();
  }
  for (auto& r : replicas_)
    if (r->thread.joinable()) r->thread.join();
}

void ReplicaGroup::run(Replica& r) {
  std::unique_lock lk(r.mu);
  for (;;) {
    r.cv.wait(lk, [&] { return r.stopping || !r.inbox.empty(); });
    if (r.stopping) return;
    auto [rec, pending] = std::move(r.inbox.front());
    r.inbox.pop_front();
    if (!r.store) continue;  // crashed: message lost
    if (r.delay.count() > 0) {
      lk.unlock();
      std::this_thread::sleep_for(r.delay);
      lk.lock();
      if (!r.store) continue;
    }
    r.store->append(rec);    // persisted (and synced) before the ack
    {
      std::lock_guard plk(pending->mu);
      ++pending->acks;
    }
    pending->cv.notify_all();
  }
}

ReplicateResult ReplicaGroup::replicate(const CapsuleRecord& rec) {
  auto pending = std::make_shared<Pending>();
  for (auto& r : replicas_) {
    {
      std::lock_guard lk(r->mu);
      r->inbox.emplace_back(rec, pending);
    }
    r->cv.notify_one();
  }
  ReplicateResult res;
  res.epoch_seq = rec.header.epoch_seq;
  res.hash = rec.record_hash;
  std::unique_lock lk(pending->mu);
  const bool ok = pending->cv.wait_for(lk, cfg_.timeout, [&] { return pending->acks >= w(); });
  res.acks = pending->acks;
  res.status = ok ? ReplicateResult::Status::kDurable : ReplicateResult::Status::kTimeout;
  return res;
}

void ReplicaGroup::kill(std::size_t i) {
  auto& r = *replicas_.at(i);
  std::lock_guard lk(r.mu);
  r.store.reset();
  r.inbox.clear();
}

void ReplicaGroup::restart(std::size_t i) {
  auto& r = *replicas_.at(i);
  std::lock_guard lk(r.mu);
  if (!r.store) r.store = std::make_unique<ReplicaStore>(r.path, cfg_.fsync);
}

void ReplicaGroup::set_persist_delay(std::size_t i, std::chrono::milliseconds d) {
  auto& r = *replicas_.at(i);
  std::lock_guard lk(r.mu);
  r.delay = d;
}

bool ReplicaGroup::alive(std::size_t i) const {
  auto& r = *replicas_.at(i);
  std::lock_guard lk(r.mu);
  return r.store != nullptr;
}

RecoverReport ReplicaGroup::replica_recover(std::size_t i) {
  RecoverReport rep;
  auto& me = *replicas_.at(i);
  std::chrono::milliseconds backoff{5};
  for (int attempt = 0; attempt < 3; ++attempt) {
    bool any_peer = false;
    for (std::size_t j = 0; j < n(); ++j) {
      if (j == i) continue;
      auto& peer = *replicas_[j];
      std::scoped_lock lk(peer.mu, me.mu);
      if (!me.store) return rep;
      if (!peer.store) continue;
      any_peer = true;
      for (const auto& h : peer.store->hashes())
        if (!me.store->contains(h)) rep.pulled += me.store->append(*peer.store->find(h)) ? 1 : 0;
    }
    if (any_peer) return rep;
    std::this_thread::sleep_for(backoff);
    backoff *= 2;
  }
  rep.degraded = true;
  return rep;
}

std::set<Hash> ReplicaGroup::record_set(std::size_t i) const {
  auto& r = *replicas_.at(i);
  std::lock_guard lk(r.mu);
  return r.store ? r.store->hashes() : std::set<Hash>{};
}

std::optional<CapsuleRecord> ReplicaGroup::fetch(const Hash& h) const {
  for (const auto& r : replicas_) {
    std::lock_guard lk(r->mu);
    if (r->store)
      if (auto rec = r->store->find(h)) return rec;
  }
  return std::nullopt;
}

}  // namespace scl
