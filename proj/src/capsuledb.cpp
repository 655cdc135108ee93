#include "scl/capsuledb.hpp"

#include <algorithm>
#include <charconv>
#include <ostream>

namespace scl {

namespace {

const char* tag_line(DbTag t) {
  switch (t) {
    case DbTag::kBlock: return "#block\n";
    case DbTag::kIndex: return "#index\n";
    case DbTag::kResult: return "#result\n";
  }
  return "";
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    auto p = s.find(sep, start);
    out.push_back(s.substr(start, p == std::string_view::npos ? std::string_view::npos : p - start));
    if (p == std::string_view::npos) return out;
    start = p + 1;
  }
}

std::uint64_t parse_u64(std::string_view s) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size()) throw ParseError("bad integer field");
  return v;
}

/// Lines after the tag line; each must end in '\n'.
std::vector<std::string_view> body_lines(ByteView plaintext, DbTag expect) {
  auto tag = payload_tag(plaintext);
  if (tag != expect) throw ParseError("unexpected store payload tag");
  std::string_view s(reinterpret_cast<const char*>(plaintext.data()), plaintext.size());
  s.remove_prefix(std::string_view(tag_line(expect)).size());
  std::vector<std::string_view> lines;
  while (!s.empty()) {
    auto nl = s.find('\n');
    if (nl == std::string_view::npos) throw ParseError("unterminated line");
    lines.push_back(s.substr(0, nl));
    s.remove_prefix(nl + 1);
  }
  return lines;
}

bool newer(const DbEntry& a, const DbEntry& b) {
  return scl::newer(a.lamport_ts, a.sender_id, b.lamport_ts, b.sender_id);
}

std::string b64(ByteView v) { return base64_encode(v); }

}  // namespace

std::optional<DbTag> payload_tag(ByteView p) {
  std::string_view s(reinterpret_cast<const char*>(p.data()), p.size());
  for (auto t : {DbTag::kBlock, DbTag::kIndex, DbTag::kResult})
    if (s.starts_with(tag_line(t))) return t;
  return std::nullopt;
}

Bytes encode_rows(DbTag tag, std::span<const DbEntry> rows) {
  if (tag == DbTag::kIndex) throw std::invalid_argument("index payloads use encode_index");
  std::string out = tag_line(tag);
  for (const auto& r : rows) {
    if (r.key.empty()) throw std::invalid_argument("empty key in store rows");
    out += b64(r.key) + ',' + b64(r.value) + ',' + std::to_string(r.lamport_ts) + ',' + std::to_string(r.sender_id) + '\n';
  }
  return to_bytes(out);
}

std::vector<DbEntry> decode_rows(ByteView plaintext) {
  auto tag = payload_tag(plaintext);
  if (tag != DbTag::kBlock && tag != DbTag::kResult) throw ParseError("not a row payload");
  std::vector<DbEntry> out;
  for (auto line : body_lines(plaintext, *tag)) {
    auto f = split(line, ',');
    if (f.size() != 4) throw ParseError("store row needs 4 fields");
    DbEntry e{base64_decode(f[0]), base64_decode(f[1]), parse_u64(f[2]), parse_u64(f[3])};
    if (e.key.empty()) throw ParseError("empty key");
    out.push_back(std::move(e));
  }
  return out;
}

Bytes encode_index(const LevelIndex& idx) {
  std::string out = tag_line(DbTag::kIndex);
  out += "c," + std::to_string(idx.clock) + '\n';
  for (const auto& [s, ts] : idx.watermarks) out += "w," + std::to_string(s) + ',' + std::to_string(ts) + '\n';
  for (std::size_t l = 0; l < idx.levels.size(); ++l) {
    out += "n," + std::to_string(l) + '\n';  // declares the level even when empty
    for (const auto& b : idx.levels[l])
      out += "l," + std::to_string(l) + ',' + to_hex(b.hash) + ',' + b64(b.min_key) + ',' + b64(b.max_key) + ',' +
             std::to_string(b.entries) + '\n';
  }
  return to_bytes(out);
}

LevelIndex decode_index(ByteView plaintext) {
  LevelIndex idx;
  for (auto line : body_lines(plaintext, DbTag::kIndex)) {
    auto f = split(line, ',');
    if (f.empty()) throw ParseError("empty index line");
    if (f[0] == "c" && f.size() == 2) {
      idx.clock = parse_u64(f[1]);
    } else if (f[0] == "w" && f.size() == 3) {
      idx.watermarks[parse_u64(f[1])] = parse_u64(f[2]);
    } else if (f[0] == "n" && f.size() == 2) {
      auto l = parse_u64(f[1]);
      if (l != idx.levels.size()) throw ParseError("levels out of order");
      idx.levels.emplace_back();
    } else if (f[0] == "l" && f.size() == 6) {
      auto l = parse_u64(f[1]);
      if (l + 1 != idx.levels.size()) throw ParseError("block listed under an undeclared level");
      idx.levels[l].push_back({hash_from_hex(f[2]), base64_decode(f[3]), base64_decode(f[4]), parse_u64(f[5])});
    } else {
      throw ParseError("unknown index line");
    }
  }
  return idx;
}

RecoveryIncomplete::RecoveryIncomplete(std::set<Hash> missing)
    : std::runtime_error("recovery incomplete: " + std::to_string(missing.size()) + " block record(s) missing"),
      missing_(std::move(missing)) {}

CapsuleDb::CapsuleDb(DbConfig cfg, SenderIdentity who, CapsuleChain& capsule)
    : cfg_(cfg), who_(who), capsule_(capsule), mt_(who.sender_id) {
  if (cfg_.memtable_cap == 0) throw std::invalid_argument("memtable_cap must be positive");
  if (cfg_.base_cap == 0) cfg_.base_cap = 4 * cfg_.memtable_cap;
  if (cfg_.block_entries == 0) cfg_.block_entries = cfg_.memtable_cap;
  if (!who.group_key || !who.sign_key) throw std::invalid_argument("store identity needs both keys");
  index_.levels.resize(1);
}

std::size_t CapsuleDb::capacity(std::size_t level) const {
  std::size_t c = cfg_.base_cap;
  for (std::size_t i = 0; i < level; ++i) c *= 10;
  return c;
}

std::size_t CapsuleDb::level_entries(std::size_t level) const {
  if (level >= index_.levels.size()) return 0;
  std::size_t n = 0;
  for (const auto& b : index_.levels[level]) n += b.entries;
  return n;
}

void CapsuleDb::ensure_level(std::size_t level) {
  if (index_.levels.size() <= level) index_.levels.resize(level + 1);
}

const std::vector<DbEntry>& CapsuleDb::block(const Hash& h) {
  auto it = decoded_.find(h);
  if (it != decoded_.end()) return it->second;
  const auto* rec = capsule_.find(h);
  if (!rec) throw RecoveryIncomplete({h});
  return decoded_.emplace(h, decode_rows(open_record(*rec, *who_.group_key))).first->second;
}

std::optional<DbEntry> CapsuleDb::search_levels(ByteView key, std::uint64_t& fetches) {
  const Bytes k(key.begin(), key.end());
  for (std::size_t l = 0; l < index_.levels.size(); ++l) {
    for (const auto& d : index_.levels[l]) {
      if (k < d.min_key || d.max_key < k) continue;
      ++fetches;
      const auto& rows = block(d.hash);
      auto it = std::lower_bound(rows.begin(), rows.end(), k, [](const DbEntry& e, const Bytes& x) { return e.key < x; });
      if (it != rows.end() && it->key == k) return *it;
      if (l > 0) break;  // lower levels hold disjoint ranges: one candidate block
    }
  }
  return std::nullopt;
}

std::optional<DbEntry> CapsuleDb::get(ByteView key) {
  if (auto v = mt_.lookup(key)) return DbEntry{Bytes(key.begin(), key.end()), v->value, v->lamport_ts, v->sender_id};
  return search_levels(key, stats_.get_block_fetches);
}

void CapsuleDb::apply_one(const KvEntry& e, std::uint64_t sender) {
  index_.clock = std::max(index_.clock, e.lamport_ts) + 1;
  if (!mt_.lookup(e.key)) {
    // Not in the memtable: the flushed value may still be newer.
    if (auto old = search_levels(e.key, stats_.apply_block_fetches)) {
      if (!scl::newer(e.lamport_ts, sender, old->lamport_ts, old->sender_id)) {
        ++stats_.rejected_stale;
        return;
      }
    }
  }
  if (mt_.apply_remote(e, sender) == ApplyResult::kApplied)
    ++stats_.applied;
  else
    ++stats_.rejected_stale;
}

void CapsuleDb::apply(const KvEntry& e, std::uint64_t sender) {
  apply_one(e, sender);
  auto& wm = index_.watermarks[sender];
  wm = std::max(wm, e.lamport_ts);
  if (mt_.size() >= cfg_.memtable_cap) flush();
}

std::size_t CapsuleDb::ingest(const CapsuleRecord& r) {
  if (r.header.msg_type != MsgType::kData || r.header.sender_id == who_.sender_id) return 0;
  auto plain = open_record(r, *who_.group_key);
  if (payload_tag(plain)) return 0;
  auto batch = decode_batch(plain);
  for (const auto& e : batch) apply_one(e, r.header.sender_id);
  // Watermarks move per record so a checkpoint never splits one.
  auto& wm = index_.watermarks[r.header.sender_id];
  wm = std::max(wm, r.header.lamport_ts);
  if (mt_.size() >= cfg_.memtable_cap) flush();
  return batch.size();
}

Hash CapsuleDb::seal(Bytes payload) {
  const auto epoch = std::max(epoch_, capsule_.last_sync_epoch());
  RecordHeader h{who_.sender_id, ++index_.clock, epoch, MsgType::kData,
                 {capsule_.expected_parent(who_.sender_id)}};
  auto rec = seal_record(std::move(h), payload, *who_.group_key, *who_.sign_key);
  emitted_.push_back(rec);
  return capsule_.append_local(std::move(rec));
}

void CapsuleDb::checkpoint() {
  checkpoint_ = seal(encode_index(index_));
  ++stats_.checkpoints;
}

void CapsuleDb::flush() {
  auto all = mt_.take_all();
  if (all.empty()) return;
  std::vector<DbEntry> rows;
  rows.reserve(all.size());
  for (auto& [k, v] : all) rows.push_back({k, std::move(v.value), v.lamport_ts, v.sender_id});
  BlockDesc d{kGenesis, rows.front().key, rows.back().key, rows.size()};
  d.hash = seal(encode_rows(DbTag::kBlock, rows));
  decoded_.emplace(d.hash, std::move(rows));
  index_.levels[0].insert(index_.levels[0].begin(), std::move(d));
  ++stats_.flushes;
  if (level_entries(0) >= capacity(0))
    compact(0);
  else
    checkpoint();
}

void CapsuleDb::compact(std::size_t level) {
  if (level >= index_.levels.size() || index_.levels[level].empty()) return;
  ensure_level(level + 1);
  std::map<Bytes, DbEntry> merged;
  auto fold = [&](const std::vector<BlockDesc>& blocks) {
    for (const auto& d : blocks)
      for (const auto& e : block(d.hash)) {
        auto [it, fresh] = merged.try_emplace(e.key, e);
        if (!fresh && newer(e, it->second)) it->second = e;
      }
  };
  fold(index_.levels[level + 1]);
  fold(index_.levels[level]);

  std::vector<BlockDesc> out;
  std::vector<DbEntry> chunk;
  auto emit = [&] {
    if (chunk.empty()) return;
    BlockDesc d{kGenesis, chunk.front().key, chunk.back().key, chunk.size()};
    d.hash = seal(encode_rows(DbTag::kBlock, chunk));
    decoded_.emplace(d.hash, std::move(chunk));
    chunk.clear();
    out.push_back(std::move(d));
  };
  for (auto& [_, e] : merged) {
    chunk.push_back(std::move(e));
    if (chunk.size() == cfg_.block_entries) emit();
  }
  emit();
  // Superseded blocks stay in the capsule; they just leave the active index.
  index_.levels[level].clear();
  index_.levels[level + 1] = std::move(out);
  ++stats_.compactions;
  if (level_entries(level + 1) >= capacity(level + 1))
    compact(level + 1);
  else
    checkpoint();
}

const CapsuleRecord& CapsuleDb::publish_result(const DbEntry& e) {
  seal(encode_rows(DbTag::kResult, std::span(&e, 1)));
  return emitted_.back();
}

std::vector<CapsuleRecord> CapsuleDb::take_emitted() { return std::exchange(emitted_, {}); }

void CapsuleDb::dump_levels(std::ostream& out) const {
  out << "memtable " << mt_.size() << '/' << cfg_.memtable_cap << '\n';
  for (std::size_t l = 0; l < index_.levels.size(); ++l)
    out << "L" << l << " blocks=" << index_.levels[l].size() << " entries=" << level_entries(l) << '/' << capacity(l)
        << '\n';
  out << "checkpoint " << (checkpoint_ == kGenesis ? std::string("none") : hash_prefix(checkpoint_, 16)) << '\n';
}

CapsuleDb CapsuleDb::recover(DbConfig cfg, SenderIdentity who, CapsuleChain& capsule, const KeyResolver& keys) {
  CapsuleDb db(cfg, who, capsule);
  const auto order = capsule.topological_order();

  // Newest verifiable index checkpoint.
  const CapsuleRecord* best = nullptr;
  std::optional<LevelIndex> best_idx;
  for (const auto* r : order) {
    if (r->header.sender_id != who.sender_id || r->header.msg_type != MsgType::kData) continue;
    if (best && r->header.lamport_ts <= best->header.lamport_ts) continue;
    const auto* key = keys(r->header.sender_id, r->header.epoch_seq);
    if (!key || verify_record(*r, *key) != VerifyStatus::kOk) continue;
    try {
      auto plain = open_record(*r, *who.group_key);
      if (payload_tag(plain) != DbTag::kIndex) continue;
      best_idx = decode_index(plain);
      best = r;
    } catch (const std::exception&) {
      continue;  // undecryptable or malformed: fall back to an older checkpoint
    }
  }

  if (best) {
    std::set<Hash> missing;
    for (const auto& level : best_idx->levels)
      for (const auto& d : level) {
        const auto* rec = capsule.find(d.hash);
        const auto* key = rec ? keys(rec->header.sender_id, rec->header.epoch_seq) : nullptr;
        if (!rec || !key || verify_record(*rec, *key) != VerifyStatus::kOk) missing.insert(d.hash);
      }
    if (!missing.empty()) throw RecoveryIncomplete(std::move(missing));
    db.index_ = std::move(*best_idx);
    if (db.index_.levels.empty()) db.index_.levels.resize(1);
    db.checkpoint_ = best->record_hash;
  }
  // The store's own newest record, even if later than the checkpoint, bounds its clock.
  for (const auto* r : order)
    if (r->header.sender_id == who.sender_id) db.index_.clock = std::max(db.index_.clock, r->header.lamport_ts);
  capsule.resume_writer(who.sender_id);

  // Play forward everything newer than the checkpoint's watermarks.
  const auto marks = db.index_.watermarks;
  for (const auto* r : order) {
    if (r->header.msg_type != MsgType::kData || r->header.sender_id == who.sender_id) continue;
    auto it = marks.find(r->header.sender_id);
    if (it != marks.end() && r->header.lamport_ts <= it->second) continue;
    const auto* key = keys(r->header.sender_id, r->header.epoch_seq);
    if (!key || verify_record(*r, *key) != VerifyStatus::kOk) continue;
    db.ingest(*r);
  }
  db.emitted_.clear();
  return db;
}

}  // namespace scl
