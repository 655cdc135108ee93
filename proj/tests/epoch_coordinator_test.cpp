#include "scl/epoch_coordinator.hpp"

#include <gtest/gtest.h>

#include "scl/harness.hpp"
#include "test_util.hpp"

namespace scl::proto {
namespace {

using harness::RunConfig;
using harness::Scenario;
using harness::WorkloadSpec;

RunConfig lossless(std::size_t workers) {
  RunConfig c;
  c.workers = workers;
  c.link = {0.0, 200, 1000, true};
  return c;
}

WorkloadSpec puts(std::size_t n, std::uint64_t seed = 1) {
  WorkloadSpec w;
  w.op_count = n;
  w.key_space = 50;
  w.seed = seed;
  return w;
}

std::optional<CapsuleRecord> parse_wire(const Bytes& msg) {
  if (msg.empty() || msg[0] != static_cast<std::uint8_t>(Wire::kRecord)) return std::nullopt;
  try {
    return parse_record(ByteView(msg).subspan(1));
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

/// Starts the scenario and steps half an epoch, so later epoch steps end
/// mid-epoch with that epoch's SYNC already out.
void begin(Scenario& s) {
  s.start();
  s.net().run_until(s.ctx().cfg.epoch / 2);
}

SyncReport report_of(Scenario& s, const Hash& h) {
  const auto* r = s.workers().front()->chain().find(h);
  EXPECT_NE(r, nullptr);
  return decode_sync(open_record(*r, s.ctx().group));
}

/// The same owner derivation Scenario uses, for forging with real keys.
Provisioning keys_for(const Scenario& s, std::uint32_t total) {
  return provision_workers(KeyNode::master_from_seed(Bytes(32, static_cast<std::uint8_t>(s.config().seed))), 0,
                           total);
}

// ---- payloads ----------------------------------------------------------

TEST(Payload, SyncRoundTrip) {
  std::mt19937_64 rng(3);
  SyncReport s;
  s.epoch_seq = 42;
  for (std::uint64_t w = 0; w < 4; ++w) s.entries.push_back({w, testing::random_hash(rng), 100 + w});
  s.app_public = testing::random_bytes(rng, 65);
  s.suspected = {2};
  EXPECT_EQ(decode_sync(encode_sync(s)), s);
  EXPECT_THROW(decode_sync(ByteView(encode_sync(s)).first(10)), ParseError);
}

TEST(Payload, SyncPrevHashesAreSortedUniqueEntries) {
  std::mt19937_64 rng(4);
  SyncReport s;
  const Hash shared = testing::random_hash(rng);
  s.entries = {{0, testing::random_hash(rng), 1}, {1, shared, 0}, {2, shared, 0}};
  auto prev = s.prev_hashes();
  EXPECT_EQ(prev.size(), 2u);
  EXPECT_TRUE(std::is_sorted(prev.begin(), prev.end()));
  EXPECT_EQ(s.heads().at(2), shared);
}

TEST(Payload, EoeRtsRequestResponseRoundTrip) {
  std::mt19937_64 rng(5);
  EoeMessage e{7, testing::random_hash(rng), 99, 12};
  EXPECT_EQ(decode_eoe(7, encode_eoe(e)), e);

  RtsMessage bare{9, std::nullopt};
  auto back = decode_rts(encode_rts(bare));
  EXPECT_EQ(back.epoch_seq, 9u);
  EXPECT_FALSE(back.previous_sync);

  testing::TestApp app(2);
  auto rec = testing::data_record(app, 0, 1, kGenesis);
  RtsMessage with{10, rec};
  back = decode_rts(encode_rts(with));
  ASSERT_TRUE(back.previous_sync);
  EXPECT_EQ(back.previous_sync->record_hash, rec.record_hash);

  RecoveryRequest rq;
  rq.hashes = {testing::random_hash(rng), testing::random_hash(rng)};
  auto rq2 = decode_request(encode_request(rq));
  EXPECT_EQ(rq2.tag, RecoveryRequest::Tag::kRecords);
  EXPECT_EQ(rq2.hashes, rq.hashes);
  RecoveryRequest get;
  get.tag = RecoveryRequest::Tag::kGet;
  get.key = to_bytes("user00000001");
  auto get2 = decode_request(encode_request(get));
  EXPECT_EQ(get2.tag, RecoveryRequest::Tag::kGet);
  EXPECT_EQ(get2.key, get.key);

  std::vector<CapsuleRecord> recs{rec, testing::data_record(app, 1, 2, kGenesis)};
  auto out = decode_response(encode_response(recs));
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[1].record_hash, recs[1].record_hash);
}

// ---- run_epoch ------------------------------------------------------------

TEST(RunEpoch, ThreeActiveWritersGiveThreeFreshHeads) {
  auto cfg = lossless(3);
  cfg.batch_size = 10;
  Scenario s(cfg, puts(30));
  begin(s);
  s.run_epochs(1);
  auto& w0 = *s.workers().front();
  ASSERT_EQ(w0.adopted_epoch(), 1u);
  const auto* sync = w0.chain().find(w0.chain().last_sync());
  ASSERT_NE(sync, nullptr);
  auto rep = decode_sync(open_record(*sync, s.ctx().group));
  ASSERT_EQ(rep.entries.size(), 3u);
  for (const auto& e : rep.entries) {
    const auto* head = w0.chain().find(e.last_record_hash);
    ASSERT_NE(head, nullptr);
    EXPECT_EQ(head->header.msg_type, MsgType::kData);
    EXPECT_EQ(head->header.sender_id, e.sender_id);
  }
  EXPECT_EQ(sync->header.prev_hashes, rep.prev_hashes());
  EXPECT_EQ(sync->header.prev_hashes.size(), 3u);
}

TEST(RunEpoch, SilentWriterRepeatsPreviousSync) {
  Scenario s(lossless(3), puts(30));
  begin(s);
  s.run_epochs(1);
  const Hash first = s.workers().front()->chain().last_sync();
  s.run_epochs(1);  // nobody writes now
  auto rep = report_of(s, s.workers().front()->chain().last_sync());
  EXPECT_EQ(rep.epoch_seq, 2u);
  for (const auto& e : rep.entries) EXPECT_EQ(e.last_record_hash, first);
  EXPECT_TRUE(rep.suspected.empty());
}

TEST(RunEpoch, EmptyEpochsStillEmit) {
  Scenario s(lossless(2), puts(0));
  begin(s);
  s.run_epochs(3);
  const auto& syncs = s.ctx().metrics.syncs;
  ASSERT_EQ(syncs.size(), 3u);
  for (std::size_t i = 0; i < syncs.size(); ++i) EXPECT_EQ(syncs[i].epoch_seq, i + 1);
  EXPECT_EQ(s.workers()[1]->adopted_epoch(), 3u);
}

TEST(RunEpoch, UnresponsiveWriterIsCarriedForwardAndSuspected) {
  Scenario s(lossless(3), puts(30));
  begin(s);
  s.run_epochs(1);
  auto before = report_of(s, s.workers().front()->chain().last_sync());
  s.net().kill(s.workers()[2]->node());
  s.run_epochs(2);  // the carried-forward SYNC waits out the straggler timeout
  auto after = report_of(s, s.workers().front()->chain().last_sync());
  ASSERT_EQ(after.suspected, std::vector<std::uint64_t>{2});
  EXPECT_EQ(after.entries[2], before.entries[2]);
  EXPECT_TRUE(s.coordinators().front()->suspected().contains(2));
}

// ---- validate / recover -------------------------------------------------------

TEST(Recover, OneDroppedRecordIsFetched) {
  Scenario s(lossless(3), puts(10));
  auto& net = s.net();
  const auto victim = s.workers()[1]->node();
  bool dropped = false;
  net.set_drop_filter([&](NodeId, NodeId to, const Bytes& m) {
    if (dropped || to != victim) return false;
    auto r = parse_wire(m);
    if (r && r->header.msg_type == MsgType::kData) return dropped = true;
    return false;
  });
  s.start();
  ASSERT_TRUE(s.run_workload());
  ASSERT_TRUE(s.drain());
  EXPECT_TRUE(dropped);
  EXPECT_GE(s.ctx().metrics.recovered, 1u);
  EXPECT_EQ(s.workers()[1]->memtable().snapshot(), s.oracle());
}

TEST(Recover, ChainOfThreeLossesNeedsThreeRounds) {
  auto cfg = lossless(2);
  cfg.batch_size = 1;
  cfg.link.delay_min = cfg.link.delay_max = 100;  // replies beat the retry timer
  // Three puts, all from worker 0 (ops are dealt round-robin).
  WorkloadSpec w = puts(5);
  Scenario s(cfg, w);
  auto& net = s.net();
  const auto victim = s.workers()[1]->node();
  int dropped = 0;
  net.set_drop_filter([&](NodeId, NodeId to, const Bytes& m) {
    if (to != victim) return false;
    auto r = parse_wire(m);
    if (r && r->header.msg_type == MsgType::kData && r->header.sender_id == 0 && dropped < 3) {
      ++dropped;
      return true;
    }
    return false;
  });
  s.start();
  ASSERT_TRUE(s.run_workload());
  ASSERT_TRUE(s.drain());
  ASSERT_EQ(dropped, 3);
  EXPECT_EQ(s.ctx().metrics.recovered, 3u);
  // One request per link of the broken chain, walking down prev_hashes.
  EXPECT_EQ(s.ctx().metrics.recovery_requests, 3u);
  EXPECT_EQ(s.workers()[1]->memtable().snapshot(), s.oracle());
}

TEST(Recover, ForgedSyncIsDiscarded) {
  Scenario s(lossless(2), puts(10));
  begin(s);
  s.run_epochs(2);
  auto& w = *s.workers()[1];
  const std::uint64_t coord = s.coordinators().front()->sender_id();
  auto prov = keys_for(s, static_cast<std::uint32_t>(coord + 2));
  SyncReport rep;
  rep.epoch_seq = w.current_epoch() + 1;
  rep.entries = {{0, kGenesis, 0}, {1, kGenesis, 0}};
  // Claims to come from the coordinator but is signed with a writer key.
  RecordHeader h{coord, 1, rep.epoch_seq, MsgType::kSync, rep.prev_hashes()};
  auto forged = seal_record(h, encode_sync(rep), s.ctx().group, *prov.workers.at(0).node.private_key);
  // Signed properly, but by a writer, which may not issue SYNCs.
  RecordHeader h2{0, 1, rep.epoch_seq, MsgType::kSync, rep.prev_hashes()};
  auto from_writer = seal_record(h2, encode_sync(rep), s.ctx().group, *prov.workers.at(0).node.private_key);
  const auto adopted = w.adopted_epoch();
  const auto rejected = s.ctx().metrics.rejected;
  w.deliver(std::vector{forged, from_writer});
  EXPECT_FALSE(w.chain().contains(forged.record_hash));
  EXPECT_FALSE(w.chain().contains(from_writer.record_hash));
  EXPECT_EQ(w.adopted_epoch(), adopted);
  EXPECT_EQ(s.ctx().metrics.rejected, rejected + 2);
}

// ---- freshness -------------------------------------------------------------

TEST(Freshness, WindowOfOneEpoch) {
  Scenario s(lossless(2), puts(0));
  begin(s);
  s.run_epochs(5);
  auto& w = *s.workers().front();
  const auto e = w.current_epoch();
  ASSERT_EQ(e, 5u);
  testing::TestApp app(2);
  auto at = [&](std::uint64_t epoch) { return testing::data_record(app, 0, 1, kGenesis, "k", "v", epoch); };
  EXPECT_FALSE(w.stale(at(e)));
  EXPECT_FALSE(w.stale(at(e - 1)));
  EXPECT_TRUE(w.stale(at(e - 2)));
}

TEST(Freshness, ReplayedRecordsNeverMutate) {
  Scenario s(lossless(3), puts(60));
  s.start();
  ASSERT_TRUE(s.run_workload());
  ASSERT_TRUE(s.drain());
  // Everything worker 0 has from others, replayed into a worker that never
  // saw it (a fresh twin would be the same): only the stale filter stands.
  std::vector<CapsuleRecord> old;
  auto& w1 = *s.workers()[1];
  for (const auto* r : s.workers()[0]->chain().topological_order())
    if (r->header.msg_type == MsgType::kData && r->header.sender_id == 0) old.push_back(*r);
  ASSERT_FALSE(old.empty());
  s.run_epochs(3);
  const auto before = w1.mutations();
  const auto drops = w1.stale_drops();
  // Strip them first so the replay is not just a duplicate.
  CapsuleChain empty;
  std::swap(w1.chain(), empty);
  w1.deliver(old);
  EXPECT_EQ(w1.mutations(), before);
  EXPECT_EQ(w1.stale_drops(), drops + old.size());
}

// ---- failover ----------------------------------------------------------------

TEST(Failover, ShadowTakesOverWithinThreeEpochs) {
  auto cfg = lossless(3);
  cfg.kill_coordinator_at_ms = 10 * cfg.epoch_ms + cfg.epoch_ms / 2;
  Scenario s(cfg, puts(0));
  s.start();
  s.run_epochs(20);
  auto& shadow = *s.coordinators()[1];
  EXPECT_TRUE(shadow.active());
  const auto& syncs = s.ctx().metrics.syncs;
  const auto kill = static_cast<Micros>(cfg.kill_coordinator_at_ms * kMs);
  auto first = std::find_if(syncs.begin(), syncs.end(), [&](const SyncEvent& e) { return e.t > kill; });
  ASSERT_NE(first, syncs.end());
  EXPECT_EQ(first->coordinator, shadow.sender_id());
  EXPECT_LE(first->t - kill, 3 * s.ctx().cfg.epoch);
  for (std::size_t i = 1; i < syncs.size(); ++i) EXPECT_GT(syncs[i].epoch_seq, syncs[i - 1].epoch_seq);
}

TEST(Failover, HealthyCoordinatorKeepsShadowsQuiet) {
  auto cfg = lossless(3);
  cfg.shadows = 2;
  Scenario s(cfg, puts(100));
  s.start();
  s.run_epochs(30);
  ASSERT_EQ(s.coordinators().size(), 3u);
  EXPECT_EQ(s.coordinators()[1]->emitted(), 0u);
  EXPECT_EQ(s.coordinators()[2]->emitted(), 0u);
  EXPECT_TRUE(s.coordinators()[0]->active());
}

TEST(Failover, PartitionHealLeavesOneActive) {
  Scenario s(lossless(3), puts(0));
  auto& net = s.net();
  const auto shadow = s.ctx().dir.node_of.at(s.coordinators()[1]->sender_id());
  // The shadow's only link is to its router.
  sim::NodeId router = 0;
  for (const auto& e : net.topology().edges())
    if (e.a == shadow || e.b == shadow) router = e.a == shadow ? e.b : e.a;
  const sim::LinkProfile ok{0.0, 200, 1000, true};
  s.start();
  s.run_epochs(2);
  net.set_link(shadow, router, {1.0, 200, 1000, true});
  s.run_epochs(8);
  EXPECT_TRUE(s.coordinators()[0]->active());
  EXPECT_TRUE(s.coordinators()[1]->active());
  EXPECT_GT(s.coordinators()[1]->emitted(), 0u);
  net.set_link(shadow, router, ok);
  s.run_epochs(4);
  const int active = s.coordinators()[0]->active() + s.coordinators()[1]->active();
  EXPECT_EQ(active, 1);
  // Every replica keeps following one increasing sequence after the heal.
  const auto seq = s.workers().front()->adopted_epoch();
  s.run_epochs(2);
  EXPECT_GT(s.workers().front()->adopted_epoch(), seq);
}

TEST(Failover, RevivedCoordinatorComesBackAsShadow) {
  auto cfg = lossless(3);
  cfg.kill_coordinator_at_ms = 5 * cfg.epoch_ms + 10;
  cfg.revive_coordinator_at_ms = 15 * cfg.epoch_ms + 10;
  Scenario s(cfg, puts(0));
  s.start();
  s.run_epochs(25);
  EXPECT_FALSE(s.coordinators()[0]->active());
  EXPECT_TRUE(s.coordinators()[1]->active());
  const auto& syncs = s.ctx().metrics.syncs;
  for (std::size_t i = 1; i < syncs.size(); ++i) EXPECT_GT(syncs[i].epoch_seq, syncs[i - 1].epoch_seq);
}

// ---- end to end ------------------------------------------------------------------

TEST(EndToEnd, LossyRunConverges) {
  auto cfg = lossless(5);
  cfg.link.loss = 0.1;
  Scenario s(cfg, puts(200));
  s.start();
  ASSERT_TRUE(s.run_workload());
  ASSERT_TRUE(s.drain());
  auto a = s.audit();
  EXPECT_TRUE(a.ok()) << a.divergence;
}

}  // namespace
}  // namespace scl::proto
