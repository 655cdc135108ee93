#include "scl/crypto_actors.hpp"

#include <gtest/gtest.h>

#include "test_util.hpp"

namespace scl {
namespace {

KvEntry kv(int i) { return {to_bytes("k" + std::to_string(i)), to_bytes("v"), static_cast<std::uint64_t>(i + 1)}; }

TEST(TaskPool, DataDrainedInSubmissionOrder) {
  TaskPool p;
  for (int i = 0; i < 3; ++i) p.submit_data(kv(i));
  auto b = p.try_take(10);
  ASSERT_TRUE(b);
  ASSERT_EQ(b->data.size(), 3u);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(b->data[i], kv(i));
}

TEST(TaskPool, ControlBeforeData) {
  TaskPool p;
  p.submit_data(kv(0));
  p.submit_control({MsgType::kEoe, 5, 1, {}, to_bytes("eoe")});
  auto b = p.try_take(1);
  ASSERT_TRUE(b);
  ASSERT_EQ(b->control.size(), 1u);
  EXPECT_EQ(b->control[0].type, MsgType::kEoe);
}

TEST(TaskPool, WouldBlockAtCapacityWithoutLoss) {
  TaskPool p(4, Backpressure::kWouldBlock);
  for (int i = 0; i < 4; ++i) ASSERT_EQ(p.submit_data(kv(i)), SubmitResult::kOk);
  EXPECT_EQ(p.submit_data(kv(4)), SubmitResult::kWouldBlock);
  EXPECT_EQ(p.data_pending(), 4u);
  p.try_take(1);
  EXPECT_EQ(p.submit_data(kv(4)), SubmitResult::kOk);
}

TEST(TaskPool, BlockingSubmitWaitsForRoom) {
  TaskPool p(2);
  std::atomic<int> submitted{0};
  std::thread t([&] {
    for (int i = 0; i < 50; ++i) {
      p.submit_data(kv(i));
      ++submitted;
    }
  });
  int got = 0, expect = 0;
  while (got < 50) {
    if (auto b = p.try_take(1)) {
      EXPECT_EQ(b->data.at(0), kv(expect++));
      ++got;
    } else {
      std::this_thread::yield();
    }
  }
  t.join();
  EXPECT_EQ(submitted.load(), 50);
}

TEST(TaskPool, CeilingBatches) {
  TaskPool p;
  for (int i = 0; i < 250; ++i) p.submit_data(kv(i));
  std::vector<std::size_t> sizes;
  while (auto b = p.try_take(100)) sizes.push_back(b->data.size());
  EXPECT_EQ(sizes, (std::vector<std::size_t>{100, 100, 50}));
}

TEST(TaskPool, PartialBatchDoesNotWait) {
  TaskPool p;
  for (int i = 0; i < 7; ++i) p.submit_data(kv(i));
  auto t0 = std::chrono::steady_clock::now();
  auto b = p.take(1000);
  EXPECT_LT(std::chrono::steady_clock::now() - t0, std::chrono::milliseconds(100));
  ASSERT_TRUE(b);
  EXPECT_EQ(b->data.size(), 7u);
}

struct Collector {
  std::mutex mu;
  std::vector<CapsuleRecord> recs;
  ActorPool::Sink sink() {
    return [this](CapsuleRecord&& r) {
      std::lock_guard lk(mu);
      recs.push_back(std::move(r));
    };
  }
};

SenderIdentity identity(const testing::TestApp& app, std::uint32_t w) { return {w, &app.group(), &app.sk(w)}; }

TEST(ActorPool, ControlRecordEmittedFirst) {
  testing::TestApp app(1);
  TaskPool p;
  p.submit_control({MsgType::kEoe, 9, 0, {}, to_bytes("eoe")});
  for (int i = 0; i < 5; ++i) p.submit_data(kv(i));
  Collector c;
  ActorPool a(p, {1, 100}, identity(app, 0), c.sink());
  a.start();
  a.stop();
  ASSERT_EQ(c.recs.size(), 2u);
  EXPECT_EQ(c.recs[0].header.msg_type, MsgType::kEoe);
  EXPECT_EQ(c.recs[1].header.msg_type, MsgType::kData);
  EXPECT_EQ(decode_batch(open_record(c.recs[1], app.group())).size(), 5u);
}

TEST(ActorPool, ConservationAndLinearChainUnderConcurrency) {
  testing::TestApp app(1);
  TaskPool p;
  Collector c;
  Hash start{};
  start[0] = 0xab;
  ActorPool a(p, {4, 7}, identity(app, 0), c.sink(), start);
  a.start();
  constexpr int n = 1000;
  for (int i = 0; i < n; ++i) p.submit_data(kv(i));
  a.stop();
  EXPECT_EQ(a.tuples_sealed(), static_cast<std::uint64_t>(n));
  std::vector<KvEntry> all;
  Hash prev = start;
  for (const auto& r : c.recs) {
    ASSERT_EQ(verify_record(r, app.pk(0)), VerifyStatus::kOk);
    ASSERT_EQ(r.header.prev_hashes.at(0), prev);
    prev = r.record_hash;
    auto batch = decode_batch(open_record(r, app.group()));
    all.insert(all.end(), batch.begin(), batch.end());
  }
  ASSERT_EQ(all.size(), static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) EXPECT_EQ(all[i], kv(i));
}

TEST(ActorPool, FailedItemRetriedOnceThenDeadLettered) {
  testing::TestApp app(1);
  TaskPool p;
  Collector c;
  ActorPool a(p, {2, 10}, identity(app, 0), c.sink());
  const Bytes poison = to_bytes("k13");
  a.set_fault_hook([&](const WorkBatch& b) {
    return std::any_of(b.data.begin(), b.data.end(), [&](const KvEntry& e) { return e.key == poison; });
  });
  for (int i = 0; i < 40; ++i) p.submit_data(kv(i));
  a.start();
  a.stop();
  auto dl = a.dead_letters();
  ASSERT_EQ(dl.size(), 1u);
  EXPECT_EQ(dl[0].data->key, poison);
  EXPECT_NE(dl[0].reason.find("injected"), std::string::npos);
  EXPECT_EQ(a.tuples_sealed(), 39u);
  Hash prev = kGenesis;
  for (const auto& r : c.recs) {
    EXPECT_EQ(r.header.prev_hashes.at(0), prev);
    prev = r.record_hash;
  }
}

TEST(Throughput, LargeBatchesBeatSingleTuples) {
  auto b1 = pipeline_throughput({1, 1}, 1000);
  auto b1000 = pipeline_throughput({1, 1000}, 5000);
  EXPECT_EQ(b1.ops, 1000u);
  EXPECT_EQ(b1000.ops, 5000u);
  EXPECT_GT(b1000.ops_per_sec(), b1.ops_per_sec());
  std::ostringstream csv;
  write_throughput_csv(csv, b1, true);
  EXPECT_EQ(csv.str().rfind("actors,batch_size,ops,seconds,ops_per_sec\n1,1,1000,", 0), 0u);
}

}  // namespace
}  // namespace scl
