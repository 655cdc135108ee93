#include "scl/capsule_chain.hpp"

#include <algorithm>
#include <istream>
#include <ostream>

namespace scl {

KeyResolver resolver_from_map(const std::map<std::uint64_t, crypto::PublicKey>& keys) {
  return [&keys](std::uint64_t sender, std::uint64_t) -> const crypto::PublicKey* {
    auto it = keys.find(sender);
    return it == keys.end() ? nullptr : &it->second;
  };
}

MergeOutcome& MergeOutcome::operator+=(const MergeOutcome& o) {
  accepted += o.accepted;
  duplicates += o.duplicates;
  orphaned += o.orphaned;
  rejected += o.rejected;
  newly_linked.insert(newly_linked.end(), o.newly_linked.begin(), o.newly_linked.end());
  return *this;
}

namespace {
bool is_chain_type(MsgType t) { return t == MsgType::kData || t == MsgType::kSync; }
}  // namespace

Hash CapsuleChain::expected_parent(std::uint64_t sender) const {
  if (dirty_.contains(sender)) return head_hash_.at(sender);
  return last_sync_;
}

Hash CapsuleChain::append_local(CapsuleRecord record) {
  if (record.header.msg_type != MsgType::kData) throw std::invalid_argument("append_local takes DATA records");
  const auto sender = record.header.sender_id;
  const Hash want = expected_parent(sender);
  if (record.header.prev_hashes.front() != want) throw WrongParent("record does not extend the expected parent");
  if (auto h = head(sender)) {
    if (records_.at(*h).header.epoch_seq > record.header.epoch_seq)
      throw std::invalid_argument("epoch_seq moved backwards for sender");
  }
  const Hash h = record.record_hash;
  if (contains(h)) throw std::invalid_argument("record already stored");
  insert(std::move(record));
  dirty_.insert(sender);
  local_.insert(sender);
  return h;
}

MergeOutcome CapsuleChain::merge(std::span<const CapsuleRecord> incoming, const KeyResolver& keys) {
  MergeOutcome out;
  for (const auto& r : incoming) {
    if (!is_chain_type(r.header.msg_type)) {
      ++out.rejected;
      continue;
    }
    if (contains(r.record_hash)) {
      ++out.duplicates;
      continue;
    }
    const auto* key = keys(r.header.sender_id, r.header.epoch_seq);
    if (key == nullptr || verify_record(r, *key) != VerifyStatus::kOk) {
      ++out.rejected;
      continue;
    }
    out += insert(r);
  }
  return out;
}

MergeOutcome CapsuleChain::insert(CapsuleRecord record) {
  MergeOutcome out;
  if (!is_chain_type(record.header.msg_type)) {
    ++out.rejected;
    return out;
  }
  const Hash h = record.record_hash;
  if (contains(h)) {
    ++out.duplicates;
    return out;
  }
  auto& stored = records_.emplace(h, std::move(record)).first->second;
  ++out.accepted;
  if (stored.header.msg_type == MsgType::kData) update_head(stored);

  bool ready = std::all_of(stored.header.prev_hashes.begin(), stored.header.prev_hashes.end(),
                           [this](const Hash& p) { return is_linked(p); });
  if (ready) {
    link(h, out);
  } else {
    park(h);
    if (orphans_.contains(h)) ++out.orphaned;
  }
  return out;
}

void CapsuleChain::link(const Hash& h, MergeOutcome& out) {
  std::vector<Hash> work{h};
  while (!work.empty()) {
    Hash cur = work.back();
    work.pop_back();
    if (linked_.contains(cur)) continue;
    linked_.insert(cur);
    orphans_.erase(cur);
    out.newly_linked.push_back(cur);
    auto it = waiting_on_.find(cur);
    if (it == waiting_on_.end()) continue;
    auto children = std::move(it->second);
    waiting_on_.erase(it);
    for (const auto& c : children) {
      auto rec = records_.find(c);
      if (rec == records_.end() || linked_.contains(c)) continue;
      const auto& prevs = rec->second.header.prev_hashes;
      if (std::all_of(prevs.begin(), prevs.end(), [this](const Hash& p) { return is_linked(p); }))
        work.push_back(c);
    }
  }
}

void CapsuleChain::park(const Hash& h) {
  orphans_.insert(h);
  orphan_order_.push_back(h);
  for (const auto& p : records_.at(h).header.prev_hashes)
    if (!is_linked(p)) waiting_on_[p].push_back(h);

  while (orphans_.size() > orphan_cap_ && !orphan_order_.empty()) {
    Hash victim = orphan_order_.front();
    orphan_order_.pop_front();
    if (!orphans_.erase(victim)) continue;
    auto rec = std::move(records_.at(victim));
    records_.erase(victim);
    ++orphans_dropped_;
    const auto sender = rec.header.sender_id;
    auto hit = head_hash_.find(sender);
    if (rec.header.msg_type == MsgType::kData && hit != head_hash_.end() && hit->second == victim) {
      head_hash_.erase(sender);
      head_ts_.erase(sender);
      for (const auto& [_, r] : records_)
        if (r.header.msg_type == MsgType::kData && r.header.sender_id == sender) update_head(r);
    }
  }
  while (!orphan_order_.empty() && !orphans_.contains(orphan_order_.front())) orphan_order_.pop_front();
}

void CapsuleChain::update_head(const CapsuleRecord& r) {
  const auto s = r.header.sender_id;
  auto it = head_ts_.find(s);
  if (it == head_ts_.end() || r.header.lamport_ts > it->second ||
      (r.header.lamport_ts == it->second && r.record_hash > head_hash_[s])) {
    head_ts_[s] = r.header.lamport_ts;
    head_hash_[s] = r.record_hash;
  }
}

void CapsuleChain::adopt_sync(const Hash& sync_hash, std::uint64_t epoch_seq,
                              const std::map<std::uint64_t, Hash>& reported_heads) {
  last_sync_ = sync_hash;
  last_sync_epoch_ = epoch_seq;
  for (auto s : local_) {
    auto head = head_hash_.find(s);
    if (head == head_hash_.end()) continue;
    auto rep = reported_heads.find(s);
    bool covered = rep != reported_heads.end() && rep->second == head->second;
    if (!covered) {
      // A silent writer's entry is an older SYNC; look through it.
      const auto& cov = cover_of(sync_hash);
      auto c = cov.find(s);
      covered = c != cov.end() && c->second.second == head->second;
    }
    // Writes covered only by a SYNC this one does not descend from count as
    // uncovered again, so they get reported into this lineage.
    if (covered)
      dirty_.erase(s);
    else
      dirty_.insert(s);
  }
}

const CapsuleChain::Cover& CapsuleChain::cover_of(const Hash& sync_hash) {
  // Walks each prev down through DATA runs to the SYNC below it.
  auto scan = [this](const Hash& sync, Cover* into) {
    std::vector<Hash> below;
    const auto* rec = find(sync);
    if (rec == nullptr) return below;
    for (const auto& p : rec->header.prev_hashes) {
      Hash cur = p;
      while (cur != kGenesis) {
        const auto* r = find(cur);
        if (r == nullptr) break;
        if (r->header.msg_type == MsgType::kSync) {
          below.push_back(cur);
          break;
        }
        if (into) {
          auto& slot = (*into)[r->header.sender_id];
          if (slot.second == Hash{} || r->header.lamport_ts > slot.first) slot = {r->header.lamport_ts, cur};
        }
        cur = r->header.prev_hashes.front();
      }
    }
    return below;
  };
  std::vector<Hash> stack{sync_hash};
  while (!stack.empty()) {
    const Hash h = stack.back();
    if (covers_.contains(h)) {
      stack.pop_back();
      continue;
    }
    bool ready = true;
    for (const auto& b : scan(h, nullptr))
      if (!covers_.contains(b)) {
        stack.push_back(b);
        ready = false;
      }
    if (!ready) continue;
    Cover c;
    for (const auto& b : scan(h, &c))
      for (const auto& [s, v] : covers_.at(b)) {
        auto& slot = c[s];
        if (slot.second == Hash{} || v.first > slot.first) slot = v;
      }
    covers_.emplace(h, std::move(c));
    stack.pop_back();
  }
  return covers_.at(sync_hash);
}

void CapsuleChain::resume_writer(std::uint64_t sender) {
  local_.insert(sender);
  if (head_hash_.contains(sender)) dirty_.insert(sender);
}

BacktrackResult CapsuleChain::backtrack(const Hash& from, const Hash& until_sync) const {
  BacktrackResult res;
  Hash cur = from;
  for (std::size_t steps = 0; steps <= records_.size() + 1; ++steps) {
    if (cur == until_sync || cur == kGenesis) {
      res.complete = true;
      return res;
    }
    const auto* rec = find(cur);
    if (rec == nullptr) {
      res.missing.insert(cur);
      return res;
    }
    if (rec->header.msg_type == MsgType::kSync) {
      res.complete = true;
      return res;
    }
    res.path.push_back(cur);
    cur = rec->header.prev_hashes.front();
  }
  return res;
}

std::set<Hash> CapsuleChain::missing_ancestors(std::span<const Hash> roots) const {
  std::set<Hash> missing;
  std::unordered_set<Hash, HashHasher> seen;
  std::vector<Hash> stack(roots.begin(), roots.end());
  while (!stack.empty()) {
    Hash h = stack.back();
    stack.pop_back();
    if (h == kGenesis || closed_.contains(h) || !seen.insert(h).second) continue;
    const auto* rec = find(h);
    if (rec == nullptr) {
      missing.insert(h);
      continue;
    }
    for (const auto& p : rec->header.prev_hashes) stack.push_back(p);
  }
  return missing;
}

void CapsuleChain::mark_closed(std::span<const Hash> roots) {
  std::vector<Hash> stack(roots.begin(), roots.end());
  while (!stack.empty()) {
    Hash h = stack.back();
    stack.pop_back();
    if (h == kGenesis || closed_.contains(h)) continue;
    const auto* rec = find(h);
    if (rec == nullptr) continue;
    closed_.insert(h);
    for (const auto& p : rec->header.prev_hashes) stack.push_back(p);
  }
}

bool CapsuleChain::contains(const Hash& h) const { return records_.contains(h); }

const CapsuleRecord* CapsuleChain::find(const Hash& h) const {
  auto it = records_.find(h);
  return it == records_.end() ? nullptr : &it->second;
}

std::set<Hash> CapsuleChain::record_set() const {
  std::set<Hash> out;
  for (const auto& [h, _] : records_) out.insert(h);
  return out;
}

std::optional<Hash> CapsuleChain::head(std::uint64_t sender) const {
  auto it = head_hash_.find(sender);
  if (it == head_hash_.end()) return std::nullopt;
  return it->second;
}

std::vector<const CapsuleRecord*> CapsuleChain::topological_order() const {
  std::vector<const CapsuleRecord*> out;
  out.reserve(records_.size());
  std::unordered_set<Hash, HashHasher> done;
  for (const auto& root : record_set()) {
    // Iterative post-order DFS.
    std::vector<std::pair<Hash, bool>> stack{{root, false}};
    while (!stack.empty()) {
      auto [h, expanded] = stack.back();
      stack.pop_back();
      if (done.contains(h)) continue;
      const auto* rec = find(h);
      if (rec == nullptr) continue;
      if (expanded) {
        done.insert(h);
        out.push_back(rec);
        continue;
      }
      stack.emplace_back(h, true);
      for (const auto& p : rec->header.prev_hashes)
        if (!done.contains(p)) stack.emplace_back(p, false);
    }
  }
  return out;
}

void CapsuleChain::dump(std::ostream& out) const {
  std::vector<CapsuleRecord> recs;
  for (const auto* r : topological_order()) recs.push_back(*r);
  write_record_stream(out, recs);
}

CapsuleChain CapsuleChain::load(std::istream& in, const KeyResolver& keys, MergeOutcome* outcome) {
  CapsuleChain chain;
  auto recs = read_record_stream(in);
  auto res = chain.merge(recs, keys);
  if (outcome != nullptr) *outcome = std::move(res);
  return chain;
}

AuthReport authenticate_chain(const CapsuleChain& chain, const KeyResolver& keys) {
  AuthReport rep;
  for (const auto* r : chain.topological_order()) {
    ++rep.records_checked;
    const auto* key = keys(r->header.sender_id, r->header.epoch_seq);
    if (key == nullptr) {
      rep.failures.push_back({r->record_hash, "unknown signer"});
    } else if (auto st = verify_record(*r, *key); st != VerifyStatus::kOk) {
      rep.failures.push_back({r->record_hash, to_string(st)});
    }
    for (const auto& p : r->header.prev_hashes)
      if (p != kGenesis && !chain.contains(p))
        rep.failures.push_back({r->record_hash, "dangling prev_hash " + hash_prefix(p)});
  }
  return rep;
}

}  // namespace scl
