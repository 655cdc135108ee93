#include "scl/epoch_coordinator.hpp"

#include <algorithm>

namespace scl::proto {

namespace {

constexpr std::size_t kHashesPerRequest = 256;
constexpr std::size_t kRecordsPerResponse = 64;

Bytes record_bytes(const CapsuleRecord& r) { return serialize_record(r); }

bool authentic(const Context& ctx, const CapsuleRecord& r) {
  const auto* key = ctx.keys(r.header.sender_id, r.header.epoch_seq);
  return key != nullptr && verify_record(r, *key) == VerifyStatus::kOk;
}

struct Unwrapped {
  Wire kind = Wire::kRecord;
  CapsuleRecord record;
  Hash ack{};
  std::uint64_t replica = 0;
};

Unwrapped unwrap(const Bytes& msg) {
  ByteReader rd(msg);
  Unwrapped u;
  auto kind = rd.u8();
  if (kind == static_cast<std::uint8_t>(Wire::kAck)) {
    u.kind = Wire::kAck;
    u.ack = rd.hash();
    u.replica = rd.u64();
    rd.expect_done();
    return u;
  }
  if (kind != static_cast<std::uint8_t>(Wire::kRecord)) throw ParseError("unknown envelope kind");
  u.record = parse_record(rd.raw(rd.remaining()));
  return u;
}

std::vector<Bytes> responses_for(std::span<const CapsuleRecord* const> found) {
  std::vector<Bytes> out;
  for (std::size_t i = 0; i < found.size(); i += kRecordsPerResponse) {
    std::vector<CapsuleRecord> chunk;
    for (std::size_t j = i; j < std::min(found.size(), i + kRecordsPerResponse); ++j) chunk.push_back(*found[j]);
    out.push_back(encode_response(chunk));
  }
  return out;
}

}  // namespace

// ---- payloads ---------------------------------------------------------

std::map<std::uint64_t, Hash> SyncReport::heads() const {
  std::map<std::uint64_t, Hash> m;
  for (const auto& e : entries) m[e.sender_id] = e.last_record_hash;
  return m;
}

std::vector<Hash> SyncReport::prev_hashes() const {
  std::vector<Hash> v;
  for (const auto& e : entries) v.push_back(e.last_record_hash);
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

Bytes encode_sync(const SyncReport& s) {
  ByteWriter w;
  w.u64(s.epoch_seq);
  w.u32(static_cast<std::uint32_t>(s.entries.size()));
  for (const auto& e : s.entries) {
    w.u64(e.sender_id);
    w.hash(e.last_record_hash);
    w.u64(e.lamport_ts);
  }
  w.blob(s.app_public);
  w.u32(static_cast<std::uint32_t>(s.suspected.size()));
  for (auto id : s.suspected) w.u64(id);
  return std::move(w).take();
}

SyncReport decode_sync(ByteView b) {
  ByteReader rd(b);
  SyncReport s;
  s.epoch_seq = rd.u64();
  auto n = rd.u32();
  if (n > rd.remaining() / 48) throw ParseError("sync entry count");
  for (std::uint32_t i = 0; i < n; ++i) {
    SyncEntry e;
    e.sender_id = rd.u64();
    e.last_record_hash = rd.hash();
    e.lamport_ts = rd.u64();
    s.entries.push_back(e);
  }
  s.app_public = rd.blob();
  auto m = rd.u32();
  if (m > rd.remaining() / 8) throw ParseError("suspected count");
  for (std::uint32_t i = 0; i < m; ++i) s.suspected.push_back(rd.u64());
  rd.expect_done();
  return s;
}

Bytes encode_eoe(const EoeMessage& m) {
  ByteWriter w;
  w.hash(m.last_record_hash);
  w.u64(m.lamport_ts);
  w.u64(m.epoch_seq);
  return std::move(w).take();
}

EoeMessage decode_eoe(std::uint64_t sender, ByteView b) {
  ByteReader rd(b);
  EoeMessage m;
  m.sender_id = sender;
  m.last_record_hash = rd.hash();
  m.lamport_ts = rd.u64();
  m.epoch_seq = rd.u64();
  rd.expect_done();
  return m;
}

Bytes encode_rts(const RtsMessage& m) {
  ByteWriter w;
  w.u64(m.epoch_seq);
  w.blob(m.previous_sync ? serialize_record(*m.previous_sync) : Bytes{});
  return std::move(w).take();
}

RtsMessage decode_rts(ByteView b) {
  ByteReader rd(b);
  RtsMessage m;
  m.epoch_seq = rd.u64();
  auto prev = rd.blob();
  rd.expect_done();
  if (!prev.empty()) m.previous_sync = parse_record(prev);
  return m;
}

Bytes encode_request(const RecoveryRequest& r) {
  ByteWriter w;
  w.u8(static_cast<std::uint8_t>(r.tag));
  if (r.tag == RecoveryRequest::Tag::kRecords) {
    w.u32(static_cast<std::uint32_t>(r.hashes.size()));
    for (const auto& h : r.hashes) w.hash(h);
  } else {
    w.blob(r.key);
  }
  return std::move(w).take();
}

RecoveryRequest decode_request(ByteView b) {
  ByteReader rd(b);
  RecoveryRequest r;
  auto tag = rd.u8();
  if (tag == 0) {
    auto n = rd.u32();
    if (n > rd.remaining() / 32) throw ParseError("hash count");
    for (std::uint32_t i = 0; i < n; ++i) r.hashes.push_back(rd.hash());
  } else if (tag == 1) {
    r.tag = RecoveryRequest::Tag::kGet;
    r.key = rd.blob();
  } else {
    throw ParseError("unknown request tag");
  }
  rd.expect_done();
  return r;
}

Bytes encode_response(std::span<const CapsuleRecord> records) {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) w.blob(serialize_record(r));
  return std::move(w).take();
}

std::vector<CapsuleRecord> decode_response(ByteView b) {
  ByteReader rd(b);
  auto n = rd.u32();
  std::vector<CapsuleRecord> out;
  for (std::uint32_t i = 0; i < n; ++i) out.push_back(parse_record(rd.blob()));
  rd.expect_done();
  return out;
}

Bytes wrap_record(const CapsuleRecord& r) {
  ByteWriter w;
  w.u8(static_cast<std::uint8_t>(Wire::kRecord));
  w.raw(record_bytes(r));
  return std::move(w).take();
}

Bytes wrap_ack(const Hash& h, std::uint64_t replica) {
  ByteWriter w;
  w.u8(static_cast<std::uint8_t>(Wire::kAck));
  w.hash(h);
  w.u64(replica);
  return std::move(w).take();
}

// ---- ReplicaNode -------------------------------------------------------

ReplicaNode::ReplicaNode(Context& ctx, NodeId node, std::uint64_t sender, const crypto::PrivateKey& sk)
    : ctx_(ctx), node_(node), me_(sender), sk_(sk) {}

bool ReplicaNode::stale(const CapsuleRecord& r) const {
  return current_epoch_ > ctx_.cfg.window && r.header.epoch_seq < current_epoch_ - ctx_.cfg.window;
}

Micros ReplicaNode::done_time() const { return std::max(ctx_.net.now(), ctx_.net.busy_until(node_)); }

CapsuleRecord ReplicaNode::seal(MsgType type, std::uint64_t ts, std::vector<Hash> prevs, ByteView payload) {
  const auto& c = ctx_.cfg.cost;
  ctx_.net.charge(node_, type == MsgType::kData ? c.seal : c.control);
  RecordHeader h{me_, ts, current_epoch_, type, std::move(prevs)};
  return seal_record(std::move(h), payload, ctx_.group, sk_);
}

void ReplicaNode::on_message(NodeId from, const Bytes& msg) {
  try {
    auto u = unwrap(msg);
    if (u.kind == Wire::kAck) {
      ctx_.net.charge(node_, ctx_.cfg.cost.control);
      on_ack(u.ack, u.replica);
      return;
    }
    handle_record(from, std::move(u.record));
  } catch (const std::exception&) {
    ++ctx_.metrics.rejected;
  }
}

void ReplicaNode::handle_record(NodeId from, CapsuleRecord r) {
  const auto type = r.header.msg_type;
  if (type == MsgType::kData || type == MsgType::kSync) {
    deliver(std::span(&r, 1));
    return;
  }
  if (type == MsgType::kEoe) return;
  ctx_.net.charge(node_, ctx_.cfg.cost.control);
  if (!authentic(ctx_, r)) {
    ++ctx_.metrics.rejected;
    return;
  }
  switch (type) {
    case MsgType::kRts: {
      if (!ctx_.is_coordinator(r.header.sender_id)) {
        ++ctx_.metrics.rejected;
        return;
      }
      if (stale(r)) {
        ++stale_drops_;
        ++ctx_.metrics.stale_drops;
        return;
      }
      auto rts = decode_rts(open_record(r, ctx_.group));
      current_epoch_ = std::max(current_epoch_, rts.epoch_seq);
      if (rts.previous_sync) deliver(std::span(&*rts.previous_sync, 1));
      if (!open_syncs_.empty() && degraded_) {
        // A new epoch buys a fresh retry budget.
        degraded_ = false;
        rounds_ = 0;
        requested_.clear();
        try_close();
      }
      on_rts(from, rts.epoch_seq);
      return;
    }
    case MsgType::kRecoveryReq: {
      auto req = decode_request(open_record(r, ctx_.group));
      if (req.tag == RecoveryRequest::Tag::kGet) {
        on_get_request(from, req.key);
        return;
      }
      std::vector<const CapsuleRecord*> found;
      for (const auto& h : req.hashes)
        if (const auto* rec = chain_.find(h)) found.push_back(rec);
      for (auto& body : responses_for(found))
        ctx_.net.unicast(node_, from, wrap_record(seal(MsgType::kRecoveryResp, 0, {}, body)));
      return;
    }
    case MsgType::kRecoveryResp: {
      auto recs = decode_response(open_record(r, ctx_.group));
      deliver(recs, true);
      return;
    }
    default:
      return;
  }
}

void ReplicaNode::deliver(std::span<const CapsuleRecord> records, bool solicited) {
  const auto& c = ctx_.cfg.cost;
  for (const auto& r : records) {
    const Hash h = r.record_hash;
    // Late copies from other responders are plain duplicates, not replays.
    if (solicited && chain_.contains(h)) continue;
    const bool asked = solicited && requested_.contains(h);
    if (!asked && stale(r)) {
      ++stale_drops_;
      ++ctx_.metrics.stale_drops;
      continue;
    }
    const auto type = r.header.msg_type;
    if ((type != MsgType::kData && type != MsgType::kSync) ||
        (type == MsgType::kSync && !ctx_.is_coordinator(r.header.sender_id))) {
      ++ctx_.metrics.rejected;
      continue;
    }
    if (chain_.contains(h)) continue;
    ctx_.net.charge(node_, c.verify);
    auto out = chain_.merge(std::span(&r, 1), ctx_.keys);
    if (out.accepted == 0) {
      ++ctx_.metrics.rejected;
      continue;
    }
    if (asked) {
      ++ctx_.metrics.recovered;
      requested_.erase(h);
      progressed_ = true;
    }
    const auto* stored = chain_.find(h);
    if (stored == nullptr) continue;  // parked then evicted
    on_accepted(*stored);
    for (const auto& lh : out.newly_linked)
      if (const auto* lr = chain_.find(lh)) on_linked(*lr);
    if (type == MsgType::kSync) consider_sync(*stored);
  }
  try_close();
}

void ReplicaNode::consider_sync(const CapsuleRecord& r) {
  const auto seq = r.header.epoch_seq;
  current_epoch_ = std::max(current_epoch_, seq);
  // Every SYNC held gets its ancestry closed, adopted or not, so the stored
  // DAG never keeps dangling links; only the newest one is adopted.
  open_syncs_.emplace(r.record_hash, seq);
  if (seq > chain_.last_sync_epoch()) {
    rounds_ = 0;
    degraded_ = false;
  }
}

std::set<Hash> ReplicaNode::close_syncs() {
  std::set<Hash> missing;
  std::optional<std::pair<std::uint64_t, Hash>> best;
  for (auto it = open_syncs_.begin(); it != open_syncs_.end();) {
    const std::array<Hash, 1> root{it->first};
    auto m = chain_.missing_ancestors(root);
    if (!m.empty()) {
      missing.insert(m.begin(), m.end());
      ++it;
      continue;
    }
    chain_.mark_closed(root);
    if (it->second > chain_.last_sync_epoch() && (!best || it->second > best->first)) best.emplace(it->second, it->first);
    it = open_syncs_.erase(it);
  }
  if (best) {
    const auto* rec = chain_.find(best->second);
    auto rep = decode_sync(open_record(*rec, ctx_.group));
    chain_.adopt_sync(best->second, best->first, rep.heads());
  }
  if (missing.empty()) {
    requested_.clear();
    degraded_ = false;
  }
  return missing;
}

void ReplicaNode::try_close() {
  if (open_syncs_.empty()) return;
  auto missing = close_syncs();
  if (missing.empty() || degraded_) return;
  std::set<Hash> fresh;
  std::set_difference(missing.begin(), missing.end(), requested_.begin(), requested_.end(),
                      std::inserter(fresh, fresh.end()));
  if (!fresh.empty()) request(fresh);
  if (!retry_armed_) {
    retry_armed_ = true;
    ctx_.net.set_timer(node_, ctx_.cfg.recovery_retry, tag(kRetry));
  }
}

void ReplicaNode::request(const std::set<Hash>& hashes) {
  std::vector<Hash> all(hashes.begin(), hashes.end());
  for (std::size_t i = 0; i < all.size(); i += kHashesPerRequest) {
    RecoveryRequest req;
    req.hashes.assign(all.begin() + static_cast<std::ptrdiff_t>(i),
                      all.begin() + static_cast<std::ptrdiff_t>(std::min(all.size(), i + kHashesPerRequest)));
    ctx_.net.multicast(node_, wrap_record(seal(MsgType::kRecoveryReq, 0, {}, encode_request(req))));
    ++ctx_.metrics.recovery_requests;
  }
  requested_.insert(hashes.begin(), hashes.end());
}

void ReplicaNode::on_timer(std::uint64_t t) {
  if ((t & 0xff) != kRetry) {
    on_custom_timer(t);
    return;
  }
  retry_armed_ = false;
  if (open_syncs_.empty() || degraded_) return;
  auto missing = close_syncs();
  if (missing.empty()) return;
  // The budget counts rounds nobody answered.
  if (progressed_) rounds_ = 0;
  progressed_ = false;
  if (rounds_ >= ctx_.cfg.retry_budget) {
    degraded_ = true;
    ++ctx_.metrics.degraded_rounds;
    return;
  }
  ++rounds_;
  request(missing);
  retry_armed_ = true;
  ctx_.net.set_timer(node_, ctx_.cfg.recovery_retry, tag(kRetry));
}

void ReplicaNode::send_eoe(NodeId to, std::uint64_t epoch) {
  EoeMessage m;
  m.sender_id = me_;
  m.epoch_seq = epoch;
  if (chain_.has_uncovered_writes(me_)) {
    m.last_record_hash = *chain_.head(me_);
  } else {
    m.last_record_hash = chain_.last_sync();
  }
  if (const auto* r = chain_.find(m.last_record_hash)) m.lamport_ts = r->header.lamport_ts;
  ctx_.net.unicast(node_, to, wrap_record(seal(MsgType::kEoe, m.lamport_ts, {}, encode_eoe(m))));
}

void ReplicaNode::on_rts(NodeId from, std::uint64_t epoch) { send_eoe(from, epoch); }

// ---- WorkerNode --------------------------------------------------------

WorkerNode::WorkerNode(Context& ctx, NodeId node, std::uint64_t sender, const crypto::PrivateKey& sk,
                       std::vector<Op> ops)
    : ReplicaNode(ctx, node, sender, sk),
      mt_(sender),
      ops_(std::move(ops)),
      quorum_(ctx.cfg.replication_f + 1) {}

void WorkerNode::start() { schedule_tick(); }

bool WorkerNode::blocked() const {
  if (awaiting_) return true;
  return ctx_.cfg.replication_f > 0 && inflight_.size() >= ctx_.cfg.max_inflight;
}

void WorkerNode::schedule_tick() {
  if (tick_armed_ || next_ >= ops_.size() || blocked()) return;
  tick_armed_ = true;
  ctx_.net.set_timer(node_, 0, tag(kTick));
}

void WorkerNode::complete(std::size_t n, Micros issued) {
  auto& m = ctx_.metrics;
  const Micros t = done_time();
  done_ += n;
  m.ops_done += n;
  m.last_done = std::max(m.last_done, t);
  for (std::size_t i = 0; i < n; ++i) m.latencies.push_back(t - issued);
}

void WorkerNode::tick() {
  tick_armed_ = false;
  if (next_ >= ops_.size() || blocked()) return;
  const auto& op = ops_[next_++];
  const Micros issued = ctx_.net.now();
  if (ctx_.metrics.first_issue < 0 || issued < ctx_.metrics.first_issue) ctx_.metrics.first_issue = issued;
  ctx_.net.charge(node_, ctx_.cfg.cost.op);
  const Bytes key = to_bytes(op.key);
  if (op.kind == OpKind::kPut) {
    auto e = mt_.put(key, op.value);
    ctx_.log.updates.push_back({e.key, e.value, e.lamport_ts, me_});
    batch_.push_back(std::move(e));
    batch_issued_.push_back(issued);
    if (batch_.size() >= ctx_.cfg.batch_size) {
      seal_batch();
    } else if (!batch_armed_) {
      batch_armed_ = true;
      ctx_.net.set_timer(node_, ctx_.cfg.batch_timeout, tag(kBatch, batch_gen_));
    }
  } else if (ctx_.cfg.cache_gets && mt_.get(key)) {
    complete(1, issued);
  } else if (ctx_.dir.capsuledb) {
    awaiting_ = std::make_pair(key, issued);
    get_attempts_ = 0;
    send_get();
  } else {
    complete(1, issued);
  }
  schedule_tick();
}

void WorkerNode::send_get() {
  RecoveryRequest req;
  req.tag = RecoveryRequest::Tag::kGet;
  req.key = awaiting_->first;
  const NodeId db = ctx_.dir.node_of.at(*ctx_.dir.capsuledb);
  ctx_.net.unicast(node_, db, wrap_record(seal(MsgType::kRecoveryReq, 0, {}, encode_request(req))));
  // Back off so a busy store is not buried in repeats of the same get.
  const Micros wait = ctx_.cfg.get_timeout << std::min(get_attempts_++, 4);
  ctx_.net.set_timer(node_, wait, tag(kGetTimeout, ++get_gen_));
}

void WorkerNode::seal_batch() {
  ++batch_gen_;
  batch_armed_ = false;
  if (batch_.empty()) return;
  const auto ts = batch_.back().lamport_ts;
  ctx_.net.charge(node_, ctx_.cfg.cost.seal_tuple * static_cast<Micros>(batch_.size()));
  auto rec = seal(MsgType::kData, ts, {chain_.expected_parent(me_)}, encode_batch(batch_));
  chain_.append_local(rec);
  ++ctx_.metrics.records_sealed;
  ctx_.net.multicast(node_, wrap_record(rec));
  auto issued = std::exchange(batch_issued_, {});
  batch_.clear();
  if (ctx_.cfg.replication_f == 0) {
    for (auto t : issued) complete(1, t);
    return;
  }
  inflight_.emplace(rec.record_hash, Inflight{std::move(issued), std::move(rec)});
  if (!resend_armed_) {
    resend_armed_ = true;
    ctx_.net.set_timer(node_, ctx_.cfg.replication_resend, tag(kResend));
  }
}

void WorkerNode::on_ack(const Hash& h, std::uint64_t replica) {
  auto it = inflight_.find(h);
  if (it == inflight_.end()) return;
  if (!quorum_.ack(h, replica)) return;
  ++ctx_.metrics.durable_records;
  for (auto t : it->second.issued) complete(1, t);
  inflight_.erase(it);
  schedule_tick();
}

void WorkerNode::on_accepted(const CapsuleRecord& r) {
  if (r.header.msg_type != MsgType::kData || r.header.sender_id == me_) return;
  const auto& c = ctx_.cfg.cost;
  auto plain = open_record(r, ctx_.group);
  if (auto t = payload_tag(plain)) {
    if (*t != DbTag::kResult || !awaiting_) return;
    auto rows = decode_rows(plain);
    if (rows.empty() || rows.front().key != awaiting_->first) return;
    complete(1, awaiting_->second);
    awaiting_.reset();
    ++get_gen_;
    schedule_tick();
    return;
  }
  auto batch = decode_batch(plain);
  ctx_.net.charge(node_, static_cast<Micros>(batch.size()) * (c.verify_tuple + c.apply_tuple));
  for (const auto& e : batch)
    if (mt_.apply_remote(e, r.header.sender_id) == ApplyResult::kApplied) ++mutations_;
}

void WorkerNode::on_rts(NodeId from, std::uint64_t epoch) {
  seal_batch();
  send_eoe(from, epoch);
}

void WorkerNode::on_custom_timer(std::uint64_t t) {
  const auto kind = t & 0xff;
  const auto gen = t >> 8;
  switch (kind) {
    case kTick:
      tick();
      break;
    case kBatch:
      if (gen == batch_gen_) seal_batch();
      schedule_tick();
      break;
    case kGetTimeout:
      if (awaiting_ && gen == get_gen_) {
        ++ctx_.metrics.get_timeouts;
        send_get();
      }
      break;
    case kResend:
      resend_armed_ = false;
      for (const auto& [h, f] : inflight_) ctx_.net.multicast(node_, wrap_record(f.record));
      if (!inflight_.empty()) {
        resend_armed_ = true;
        ctx_.net.set_timer(node_, ctx_.cfg.replication_resend, tag(kResend));
      }
      break;
    default:
      break;
  }
}

// ---- DbNode --------------------------------------------------------------

DbNode::DbNode(Context& ctx, NodeId node, std::uint64_t sender, const crypto::PrivateKey& sk)
    : ReplicaNode(ctx, node, sender, sk), who_{sender, &ctx.group, &sk}, db_(ctx.cfg.db, who_, chain_) {}

void DbNode::publish() {
  for (const auto& rec : db_.take_emitted()) {
    ctx_.net.charge(node_, ctx_.cfg.cost.seal);
    ctx_.net.multicast(node_, wrap_record(rec));
  }
}

void DbNode::on_linked(const CapsuleRecord& r) {
  if (r.header.msg_type != MsgType::kData || r.header.sender_id == me_) return;
  db_.set_epoch(current_epoch_);
  const auto n = db_.ingest(r);
  ctx_.net.charge(node_, static_cast<Micros>(n) * ctx_.cfg.cost.db_ingest_tuple);
  publish();
}

void DbNode::on_get_request(NodeId, const Bytes& key) {
  db_.set_epoch(current_epoch_);
  const auto before = db_.stats().get_block_fetches;
  auto e = db_.get(key);
  const auto fetches = db_.stats().get_block_fetches - before;
  ctx_.net.charge(node_, ctx_.cfg.cost.db_get + static_cast<Micros>(fetches) * ctx_.cfg.cost.db_fetch);
  db_.publish_result(e ? *e : DbEntry{key, {}, 0, 0});
  ++gets_;
  publish();
}

// ---- DurabilityNode ------------------------------------------------------

DurabilityNode::DurabilityNode(Context& ctx, NodeId node, std::uint64_t sender, const crypto::PrivateKey& sk)
    : ctx_(ctx), node_(node), me_(sender), sk_(sk) {}

void DurabilityNode::on_message(NodeId from, const Bytes& msg) {
  const auto& c = ctx_.cfg.cost;
  try {
    auto u = unwrap(msg);
    if (u.kind != Wire::kRecord) return;
    auto& r = u.record;
    switch (r.header.msg_type) {
      case MsgType::kData:
      case MsgType::kSync: {
        const Hash h = r.record_hash;
        if (!store_.contains(h)) {
          ctx_.net.charge(node_, c.verify);
          if (!authentic(ctx_, r)) {
            ++ctx_.metrics.rejected;
            return;
          }
          ctx_.net.charge(node_, c.persist);
          store_.emplace(h, std::move(r));
        }
        if (store_.at(h).header.msg_type == MsgType::kData) ctx_.net.unicast(node_, from, wrap_ack(h, me_));
        return;
      }
      case MsgType::kRecoveryReq: {
        ctx_.net.charge(node_, c.control);
        if (!authentic(ctx_, r)) return;
        auto req = decode_request(open_record(r, ctx_.group));
        if (req.tag != RecoveryRequest::Tag::kRecords) return;
        std::vector<const CapsuleRecord*> found;
        for (const auto& h : req.hashes) {
          auto it = store_.find(h);
          if (it != store_.end()) found.push_back(&it->second);
        }
        for (auto& body : responses_for(found)) {
          ctx_.net.charge(node_, c.control);
          RecordHeader hd{me_, 0, r.header.epoch_seq, MsgType::kRecoveryResp, {}};
          ctx_.net.unicast(node_, from, wrap_record(seal_record(std::move(hd), body, ctx_.group, sk_)));
        }
        return;
      }
      default:
        return;
    }
  } catch (const std::exception&) {
    ++ctx_.metrics.rejected;
  }
}

// ---- CoordinatorNode -----------------------------------------------------

CoordinatorNode::CoordinatorNode(Context& ctx, NodeId node, std::uint64_t sender, const crypto::PrivateKey& sk,
                                 std::size_t rank)
    : ctx_(ctx), node_(node), me_(sender), sk_(sk), rank_(rank) {}

Micros CoordinatorNode::silence() const {
  const auto e = static_cast<double>(ctx_.cfg.epoch);
  // The first shadow waits failover_mult epochs, each further one an epoch more.
  const double extra = rank_ > 1 ? static_cast<double>(rank_ - 1) : 0.0;
  return static_cast<Micros>((ctx_.cfg.failover_mult + extra) * e);
}

void CoordinatorNode::start() {
  last_sync_time_ = ctx_.net.now();
  if (rank_ == 0) {
    active_ = true;
    ctx_.net.set_timer(node_, ctx_.cfg.epoch, tag(kEpoch));
  } else {
    arm_watch();
  }
}

void CoordinatorNode::restart() {
  active_ = false;
  collecting_ = false;
  ++gen_;
  last_sync_time_ = ctx_.net.now();
  arm_watch();
}

void CoordinatorNode::arm_watch() {
  const Micros due = last_sync_time_ + silence();
  ctx_.net.set_timer(node_, std::max<Micros>(due - ctx_.net.now(), 1), tag(kWatch));
}

void CoordinatorNode::demote() {
  active_ = false;
  collecting_ = false;
  ++gen_;
  arm_watch();
}

void CoordinatorNode::start_epoch() {
  collect_seq_ = last_seq_ + 1;
  collecting_ = true;
  eoe_.clear();
  ctx_.net.charge(node_, ctx_.cfg.cost.control);
  RtsMessage m{collect_seq_, last_sync_};
  RecordHeader h{me_, 0, collect_seq_, MsgType::kRts, {}};
  auto rts = seal_record(std::move(h), encode_rts(m), ctx_.group, sk_);
  ctx_.net.multicast(node_, wrap_record(rts));
  ctx_.net.set_timer(node_, ctx_.cfg.epoch / 4, tag(kRerequest));
  ctx_.net.set_timer(node_, ctx_.cfg.epoch / 2, tag(kCollectTimeout));
}

void CoordinatorNode::emit_sync() {
  collecting_ = false;
  SyncReport rep;
  rep.epoch_seq = collect_seq_;
  rep.app_public = ctx_.app_public;
  std::uint64_t max_ts = 0;
  for (auto w : ctx_.dir.writers) {
    SyncEntry e{w, kGenesis, 0};
    if (auto it = eoe_.find(w); it != eoe_.end()) {
      e = it->second;
      suspected_.erase(w);
    } else {
      if (auto prev = entries_.find(w); prev != entries_.end()) e = prev->second;
      suspected_.insert(w);
      rep.suspected.push_back(w);
    }
    max_ts = std::max(max_ts, e.lamport_ts);
    rep.entries.push_back(e);
  }
  ctx_.net.charge(node_, ctx_.cfg.cost.seal);
  RecordHeader h{me_, max_ts + 1, rep.epoch_seq, MsgType::kSync, rep.prev_hashes()};
  auto rec = seal_record(std::move(h), encode_sync(rep), ctx_.group, sk_);
  for (const auto& e : rep.entries) entries_[e.sender_id] = e;
  last_seq_ = emitted_seq_ = rep.epoch_seq;
  last_sync_ = rec;
  last_sync_time_ = ctx_.net.now();
  syncs_.emplace(rec.record_hash, rec);
  ++emitted_;
  ctx_.metrics.syncs.push_back({ctx_.net.now(), rep.epoch_seq, me_, rep.suspected.size()});
  ctx_.net.multicast(node_, wrap_record(rec));
}

void CoordinatorNode::on_timer(std::uint64_t t) {
  if ((t >> 8) != gen_) return;
  switch (t & 0xff) {
    case kEpoch:
      if (!active_) return;
      start_epoch();
      ctx_.net.set_timer(node_, ctx_.cfg.epoch, tag(kEpoch));
      break;
    case kRerequest: {
      if (!active_ || !collecting_) return;
      RtsMessage m{collect_seq_, last_sync_};
      RecordHeader h{me_, 0, collect_seq_, MsgType::kRts, {}};
      auto rts = seal_record(std::move(h), encode_rts(m), ctx_.group, sk_);
      for (auto w : ctx_.dir.writers)
        if (!eoe_.contains(w)) {
          ctx_.net.charge(node_, ctx_.cfg.cost.control);
          ctx_.net.unicast(node_, ctx_.dir.node_of.at(w), wrap_record(rts));
        }
      break;
    }
    case kCollectTimeout:
      if (active_ && collecting_) emit_sync();
      break;
    case kWatch:
      if (active_) return;
      if (ctx_.net.now() - last_sync_time_ >= silence()) {
        active_ = true;
        ++gen_;
        start_epoch();
        ctx_.net.set_timer(node_, ctx_.cfg.epoch, tag(kEpoch));
      } else {
        arm_watch();
      }
      break;
    default:
      break;
  }
}

void CoordinatorNode::observe_sync(const CapsuleRecord& r) {
  if (syncs_.contains(r.record_hash) || !ctx_.is_coordinator(r.header.sender_id)) return;
  ctx_.net.charge(node_, ctx_.cfg.cost.verify);
  if (!authentic(ctx_, r)) return;
  auto rep = decode_sync(open_record(r, ctx_.group));
  syncs_.emplace(r.record_hash, r);
  const auto seq = rep.epoch_seq;
  if (seq >= last_seq_) last_sync_time_ = ctx_.net.now();
  if (seq > last_seq_) {
    last_seq_ = seq;
    last_sync_ = r;
    for (const auto& e : rep.entries) entries_[e.sender_id] = e;
  }
  // Lower seq loses; on a tie the lower id keeps the role.
  if (active_ && (seq > emitted_seq_ || (seq == emitted_seq_ && r.header.sender_id < me_))) demote();
}

void CoordinatorNode::on_message(NodeId from, const Bytes& msg) {
  const auto& c = ctx_.cfg.cost;
  try {
    auto u = unwrap(msg);
    if (u.kind != Wire::kRecord) return;
    auto& r = u.record;
    switch (r.header.msg_type) {
      case MsgType::kEoe: {
        if (!active_ || !collecting_ || !ctx_.dir.writers.contains(r.header.sender_id)) return;
        ctx_.net.charge(node_, c.control);
        if (!authentic(ctx_, r)) return;
        auto m = decode_eoe(r.header.sender_id, open_record(r, ctx_.group));
        if (m.epoch_seq != collect_seq_) return;
        eoe_[m.sender_id] = {m.sender_id, m.last_record_hash, m.lamport_ts};
        if (eoe_.size() == ctx_.dir.writers.size()) emit_sync();
        return;
      }
      case MsgType::kSync:
        if (r.header.sender_id == me_ || !ctx_.is_coordinator(r.header.sender_id)) return;
        observe_sync(r);
        return;
      case MsgType::kRts: {
        if (r.header.sender_id == me_ || !ctx_.is_coordinator(r.header.sender_id)) return;
        ctx_.net.charge(node_, c.control);
        if (!authentic(ctx_, r)) return;
        auto rts = decode_rts(open_record(r, ctx_.group));
        if (rts.previous_sync) observe_sync(*rts.previous_sync);
        // An RTS is as good a heartbeat as a SYNC.
        if (rts.epoch_seq > last_seq_) last_sync_time_ = ctx_.net.now();
        if (active_ && (rts.epoch_seq > collect_seq_ || (rts.epoch_seq == collect_seq_ && r.header.sender_id < me_)))
          demote();
        return;
      }
      case MsgType::kRecoveryReq: {
        ctx_.net.charge(node_, c.control);
        if (!authentic(ctx_, r)) return;
        auto req = decode_request(open_record(r, ctx_.group));
        if (req.tag != RecoveryRequest::Tag::kRecords) return;
        std::vector<const CapsuleRecord*> found;
        for (const auto& h : req.hashes) {
          auto it = syncs_.find(h);
          if (it != syncs_.end()) found.push_back(&it->second);
        }
        for (auto& body : responses_for(found)) {
          RecordHeader hd{me_, 0, r.header.epoch_seq, MsgType::kRecoveryResp, {}};
          ctx_.net.unicast(node_, from, wrap_record(seal_record(std::move(hd), body, ctx_.group, sk_)));
        }
        return;
      }
      default:
        return;
    }
  } catch (const std::exception&) {
    ++ctx_.metrics.rejected;
  }
}

}  // namespace scl::proto
