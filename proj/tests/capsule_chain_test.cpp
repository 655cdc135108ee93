#include "scl/capsule_chain.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "test_util.hpp"

namespace scl {
namespace {

using testing::TestApp;

constexpr std::uint32_t kCoord = 5;

struct Fixture {
  TestApp app{6};
  std::map<std::uint64_t, crypto::PublicKey> keys;
  Fixture() {
    for (std::uint32_t i = 0; i < 6; ++i) keys.emplace(i, app.pk(i));
  }
  KeyResolver resolver() const { return resolver_from_map(keys); }

  CapsuleRecord sync(std::uint64_t epoch, std::vector<Hash> parents) const {
    std::sort(parents.begin(), parents.end());
    parents.erase(std::unique(parents.begin(), parents.end()), parents.end());
    RecordHeader h{kCoord, epoch, epoch, MsgType::kSync, std::move(parents)};
    return seal_record(h, to_bytes("report"), app.group(), app.sk(kCoord));
  }
};

/// Three writers, `epochs` epochs of a few writes each, with SYNC rendezvous.
std::vector<CapsuleRecord> build_history(const Fixture& f, int epochs, std::mt19937_64& rng) {
  std::vector<CapsuleRecord> all;
  Hash last_sync = kGenesis;
  std::uint64_t ts = 1;
  for (int e = 0; e < epochs; ++e) {
    std::vector<Hash> heads;
    for (std::uint32_t w = 0; w < 3; ++w) {
      Hash parent = last_sync;
      int writes = static_cast<int>(rng() % 3);
      for (int i = 0; i < writes; ++i) {
        all.push_back(testing::data_record(f.app, w, ts++, parent, "k" + std::to_string(rng() % 5), "v", e));
        parent = all.back().record_hash;
      }
      heads.push_back(parent);
    }
    all.push_back(f.sync(e + 1, heads));
    last_sync = all.back().record_hash;
  }
  return all;
}

CapsuleChain chain_of(const std::vector<CapsuleRecord>& recs, const KeyResolver& keys) {
  CapsuleChain c;
  c.merge(recs, keys);
  return c;
}

std::vector<CapsuleRecord> records_of(const CapsuleChain& c) {
  std::vector<CapsuleRecord> out;
  for (const auto* r : c.topological_order()) out.push_back(*r);
  return out;
}

CapsuleChain merged(CapsuleChain a, const CapsuleChain& b, const KeyResolver& keys) {
  a.merge(records_of(b), keys);
  return a;
}

TEST(AppendLocal, FirstWriteAfterSyncPointsAtSync) {
  Fixture f;
  CapsuleChain c;
  EXPECT_EQ(c.expected_parent(0), kGenesis);
  auto w0 = testing::data_record(f.app, 0, 1, kGenesis);
  auto h0 = c.append_local(w0);
  auto s = f.sync(1, {h0});
  c.insert(s);
  c.adopt_sync(s.record_hash, 1, {{0, h0}});
  EXPECT_EQ(c.expected_parent(0), s.record_hash);
  auto w1 = testing::data_record(f.app, 0, 2, s.record_hash, "k", "v", 1);
  auto h1 = c.append_local(w1);
  EXPECT_EQ(c.expected_parent(0), h1);
  auto w2 = testing::data_record(f.app, 0, 3, h1, "k", "v", 1);
  EXPECT_EQ(c.append_local(w2), w2.record_hash);
  auto stale = testing::data_record(f.app, 0, 4, h1, "k", "v", 1);
  EXPECT_THROW(c.append_local(stale), WrongParent);
}

TEST(AppendLocal, UncoveredWritesKeepChainingAcrossSync) {
  Fixture f;
  CapsuleChain c;
  auto h0 = c.append_local(testing::data_record(f.app, 0, 1, kGenesis));
  auto s = f.sync(1, {kGenesis});  // report missed writer 0's head
  c.insert(s);
  c.adopt_sync(s.record_hash, 1, {{0, kGenesis}});
  EXPECT_TRUE(c.has_uncovered_writes(0));
  EXPECT_EQ(c.expected_parent(0), h0);
}

TEST(AppendLocal, CoverageFromAnotherLineageIsWithdrawn) {
  Fixture f;
  CapsuleChain c;
  auto base = f.sync(1, {kGenesis});
  c.insert(base);
  c.adopt_sync(base.record_hash, 1, {});
  auto h = c.append_local(testing::data_record(f.app, 0, 2, base.record_hash));
  // A SYNC from one branch covers the write...
  auto covering = f.sync(2, {h});
  c.insert(covering);
  c.adopt_sync(covering.record_hash, 2, {{0, h}});
  EXPECT_FALSE(c.has_uncovered_writes(0));
  // ...then a later SYNC that only descends from `base` is adopted.
  auto other = f.sync(3, {base.record_hash});
  c.insert(other);
  c.adopt_sync(other.record_hash, 3, {{0, base.record_hash}});
  EXPECT_TRUE(c.has_uncovered_writes(0));
  EXPECT_EQ(c.expected_parent(0), h);
  // A silent-writer entry that points at the covering SYNC keeps it covered.
  auto through = f.sync(4, {covering.record_hash, other.record_hash});
  c.insert(through);
  c.adopt_sync(through.record_hash, 4, {{0, covering.record_hash}});
  EXPECT_FALSE(c.has_uncovered_writes(0));
}

TEST(Merge, CommutativeOnTwoReplicas) {
  Fixture f;
  std::mt19937_64 rng(1);
  auto hist = build_history(f, 3, rng);
  std::vector<CapsuleRecord> a, b;
  for (std::size_t i = 0; i < hist.size(); ++i) (i % 3 == 0 ? a : b).push_back(hist[i]);
  auto ca = chain_of(a, f.resolver());
  auto cb = chain_of(b, f.resolver());
  EXPECT_TRUE(same_records(merged(ca, cb, f.resolver()), merged(cb, ca, f.resolver())));
  EXPECT_EQ(merged(ca, cb, f.resolver()).record_set().size(), hist.size());
}

TEST(Merge, IdempotentWithOwnRecords) {
  Fixture f;
  std::mt19937_64 rng(2);
  auto c = chain_of(build_history(f, 2, rng), f.resolver());
  auto before = c.record_set();
  auto out = c.merge(records_of(c), f.resolver());
  EXPECT_EQ(out.accepted, 0u);
  EXPECT_EQ(out.duplicates, before.size());
  EXPECT_EQ(c.record_set(), before);
}

TEST(Merge, AllSixOrdersAgree) {
  Fixture f;
  std::mt19937_64 rng(3);
  auto hist = build_history(f, 3, rng);
  std::array<std::vector<CapsuleRecord>, 3> parts;
  for (const auto& r : hist) parts[rng() % 3].push_back(r);
  std::array<int, 3> order{0, 1, 2};
  std::optional<std::set<Hash>> expected;
  do {
    CapsuleChain c;
    for (int i : order) c.merge(parts[i], f.resolver());
    if (!expected) expected = c.record_set();
    EXPECT_EQ(c.record_set(), *expected);
    EXPECT_EQ(c.orphan_count(), 0u);
  } while (std::next_permutation(order.begin(), order.end()));
}

TEST(Merge, CrdtLawsOnRandomTriples) {
  Fixture f;
  std::mt19937_64 rng(4);
  auto pool = build_history(f, 4, rng);
  auto keys = f.resolver();
  auto pick = [&] {
    std::vector<CapsuleRecord> s;
    for (const auto& r : pool)
      if (rng() % 3 == 0) s.push_back(r);
    std::shuffle(s.begin(), s.end(), rng);
    return chain_of(s, keys);
  };
  for (int trial = 0; trial < 100; ++trial) {
    auto x = pick(), y = pick(), z = pick();
    EXPECT_EQ(merged(merged(x, y, keys), z, keys).record_set(), merged(x, merged(y, z, keys), keys).record_set());
    EXPECT_EQ(merged(x, y, keys).record_set(), merged(y, x, keys).record_set());
    EXPECT_EQ(merged(x, x, keys).record_set(), x.record_set());
  }
}

TEST(Merge, OrphansRelinkWhenParentsArrive) {
  Fixture f;
  auto a = testing::data_record(f.app, 0, 1, kGenesis);
  auto b = testing::data_record(f.app, 0, 2, a.record_hash);
  auto c = testing::data_record(f.app, 0, 3, b.record_hash);
  CapsuleChain chain;
  auto o1 = chain.merge(std::vector{c, b}, f.resolver());
  EXPECT_EQ(o1.accepted, 2u);
  EXPECT_EQ(o1.orphaned, 2u);
  EXPECT_TRUE(o1.newly_linked.empty());
  EXPECT_EQ(chain.orphan_count(), 2u);
  auto o2 = chain.merge(std::vector{a}, f.resolver());
  EXPECT_EQ(chain.orphan_count(), 0u);
  EXPECT_EQ(o2.newly_linked, (std::vector<Hash>{a.record_hash, b.record_hash, c.record_hash}));
}

TEST(Merge, RejectsForgedUnknownAndControlRecords) {
  Fixture f;
  auto good = testing::data_record(f.app, 0, 1, kGenesis);
  auto forged = testing::data_record(f.app, 1, 1, kGenesis);
  forged.signature = good.signature;
  RecordHeader h{9, 1, 0, MsgType::kData, {kGenesis}};
  auto unknown = seal_record(h, to_bytes("x"), f.app.group(), f.app.sk(0));
  RecordHeader rh{0, 1, 0, MsgType::kRts, {}};
  auto rts = seal_record(rh, {}, f.app.group(), f.app.sk(0));
  CapsuleChain chain;
  auto out = chain.merge(std::vector{good, forged, unknown, rts}, f.resolver());
  EXPECT_EQ(out.accepted, 1u);
  EXPECT_EQ(out.rejected, 3u);
  EXPECT_EQ(chain.size(), 1u);
}

TEST(Merge, OrphanPoolCapDropsOldest) {
  Fixture f;
  CapsuleChain chain(2);
  std::mt19937_64 rng(5);
  std::vector<CapsuleRecord> orphans;
  for (int i = 0; i < 3; ++i) orphans.push_back(testing::data_record(f.app, 0, i + 1, testing::random_hash(rng)));
  chain.merge(orphans, f.resolver());
  EXPECT_EQ(chain.orphan_count(), 2u);
  EXPECT_EQ(chain.orphans_dropped(), 1u);
  EXPECT_FALSE(chain.contains(orphans[0].record_hash));
  EXPECT_TRUE(chain.contains(orphans[2].record_hash));
}

struct Epoch5 {
  Fixture f;
  CapsuleRecord sync0 = f.sync(1, {kGenesis});
  std::vector<CapsuleRecord> recs;
  Epoch5() {
    Hash parent = sync0.record_hash;
    for (int i = 0; i < 5; ++i) {
      recs.push_back(testing::data_record(f.app, 0, i + 2, parent, "k", "v", 1));
      parent = recs.back().record_hash;
    }
  }
};

TEST(Backtrack, IntactEpoch) {
  Epoch5 e;
  CapsuleChain c;
  c.insert(e.sync0);
  for (auto& r : e.recs) c.insert(r);
  auto res = c.backtrack(e.recs.back().record_hash, e.sync0.record_hash);
  EXPECT_TRUE(res.complete);
  EXPECT_EQ(res.path.size(), 5u);
  EXPECT_TRUE(res.missing.empty());
  EXPECT_EQ(res.path.front(), e.recs.back().record_hash);
}

TEST(Backtrack, DeletedRecordReported) {
  Epoch5 e;
  CapsuleChain c;
  c.insert(e.sync0);
  for (int i = 0; i < 5; ++i)
    if (i != 2) c.insert(e.recs[i]);
  auto res = c.backtrack(e.recs.back().record_hash, e.sync0.record_hash);
  EXPECT_FALSE(res.complete);
  EXPECT_EQ(res.missing, std::set<Hash>{e.recs[2].record_hash});
}

TEST(Backtrack, UnknownStartIsMissing) {
  Epoch5 e;
  CapsuleChain c;
  Hash bogus{};
  bogus[0] = 1;
  auto res = c.backtrack(bogus, e.sync0.record_hash);
  EXPECT_EQ(res.missing, std::set<Hash>{bogus});
}

TEST(MissingAncestors, MatchesReachabilityOracle) {
  Fixture f;
  std::mt19937_64 rng(6);
  auto hist = build_history(f, 4, rng);
  std::map<Hash, const CapsuleRecord*> full;
  for (const auto& r : hist) full[r.record_hash] = &r;
  const Hash root = hist.back().record_hash;  // final SYNC

  for (int trial = 0; trial < 30; ++trial) {
    std::set<Hash> deleted;
    CapsuleChain c;
    for (const auto& r : hist) {
      if (r.record_hash != root && rng() % 4 == 0)
        deleted.insert(r.record_hash);
      else
        c.insert(r);
    }
    // Oracle: walk the FULL graph from the root, but only through records
    // the replica holds; a deleted hash is reported iff some held, reachable
    // record references it.
    std::set<Hash> expected;
    std::set<Hash> seen;
    std::vector<Hash> stack{root};
    while (!stack.empty()) {
      Hash h = stack.back();
      stack.pop_back();
      if (h == kGenesis || !seen.insert(h).second) continue;
      if (deleted.contains(h)) {
        expected.insert(h);
        continue;
      }
      for (const auto& p : full.at(h)->header.prev_hashes) stack.push_back(p);
    }
    EXPECT_EQ(c.missing_ancestors(std::vector{root}), expected);
  }
}

TEST(MissingAncestors, CompleteEpochBacktracksFromEveryHead) {
  Fixture f;
  std::mt19937_64 rng(7);
  auto hist = build_history(f, 3, rng);
  auto c = chain_of(hist, f.resolver());
  const auto& last = hist.back();
  ASSERT_EQ(last.header.msg_type, MsgType::kSync);
  for (const auto& h : last.header.prev_hashes) {
    auto res = c.backtrack(h, kGenesis);
    EXPECT_TRUE(res.complete);
    EXPECT_TRUE(res.missing.empty());
  }
  EXPECT_TRUE(c.missing_ancestors(std::vector{last.record_hash}).empty());
}

TEST(Authenticate, HonestChainIsValidWithoutPayloadKey) {
  Fixture f;
  std::mt19937_64 rng(8);
  auto c = chain_of(build_history(f, 3, rng), f.resolver());
  auto rep = authenticate_chain(c, f.resolver());
  EXPECT_TRUE(rep.valid());
  EXPECT_EQ(rep.records_checked, c.size());
}

TEST(Authenticate, ForgedSignatureAndDanglingLinkListed) {
  Fixture f;
  auto a = testing::data_record(f.app, 0, 1, kGenesis);
  auto b = testing::data_record(f.app, 1, 1, kGenesis);
  b.signature[3] ^= 0x10;
  std::mt19937_64 rng(9);
  auto dangling = testing::data_record(f.app, 2, 1, testing::random_hash(rng));
  CapsuleChain c;
  c.insert(a);
  c.insert(b);
  c.insert(dangling);
  auto rep = authenticate_chain(c, f.resolver());
  EXPECT_FALSE(rep.valid());
  ASSERT_EQ(rep.failures.size(), 2u);
  std::set<Hash> bad;
  for (const auto& fl : rep.failures) bad.insert(fl.record_hash);
  EXPECT_EQ(bad, (std::set<Hash>{b.record_hash, dangling.record_hash}));
}

TEST(DumpLoad, RoundTripKeepsRecordSet) {
  Fixture f;
  std::mt19937_64 rng(10);
  auto c = chain_of(build_history(f, 3, rng), f.resolver());
  std::stringstream ss;
  c.dump(ss);
  MergeOutcome out;
  auto loaded = CapsuleChain::load(ss, f.resolver(), &out);
  EXPECT_TRUE(same_records(c, loaded));
  EXPECT_EQ(out.orphaned, 0u);
}

}  // namespace
}  // namespace scl
