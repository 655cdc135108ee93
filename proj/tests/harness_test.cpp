#include "scl/harness.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

namespace scl::harness {
namespace {

TEST(Zipf, HeadToTenthRatioMatchesExponent) {
  ZipfGenerator z(10'000, 0.99);
  std::mt19937_64 rng(42);
  std::vector<std::size_t> hits(10'000);
  for (int i = 0; i < 1'000'000; ++i) ++hits[z.next(rng)];
  const double ratio = static_cast<double>(hits[0]) / static_cast<double>(hits[9]);
  const double want = std::pow(10.0, 0.99);
  EXPECT_NEAR(ratio, want, want * 0.10);
  EXPECT_NEAR(z.mass(0) / z.mass(9), want, 1e-9);
}

TEST(Zipf, ThetaZeroIsUniform) {
  ZipfGenerator z(4, 0.0);
  for (std::size_t r = 0; r < 4; ++r) EXPECT_DOUBLE_EQ(z.mass(r), 0.25);
}

TEST(Zipf, RejectsEmptyKeySpace) { EXPECT_THROW(ZipfGenerator(0, 1.0), ConfigError); }

TEST(Workload, ReadFractionZeroIsPutsOnly) {
  WorkloadSpec w;
  w.op_count = 5000;
  for (const auto& op : gen_workload(w)) {
    EXPECT_EQ(op.kind, proto::OpKind::kPut);
    EXPECT_EQ(op.value.size(), w.value_bytes);
  }
}

TEST(Workload, ReadFractionIsRespected) {
  WorkloadSpec w;
  w.op_count = 20'000;
  w.read_fraction = 0.3;
  std::size_t gets = 0;
  for (const auto& op : gen_workload(w)) gets += op.kind == proto::OpKind::kGet;
  EXPECT_NEAR(static_cast<double>(gets) / 20'000, 0.3, 0.02);
}

TEST(Workload, SameSeedSameStream) {
  WorkloadSpec w;
  w.op_count = 2000;
  w.read_fraction = 0.5;
  auto a = gen_workload(w), b = gen_workload(w);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].kind, b[i].kind);
    EXPECT_EQ(a[i].key, b[i].key);
    EXPECT_EQ(a[i].value, b[i].value);
  }
  w.seed = 2;
  auto c = gen_workload(w);
  bool differ = false;
  for (std::size_t i = 0; i < a.size() && !differ; ++i) differ = a[i].key != c[i].key;
  EXPECT_TRUE(differ);
}

TEST(Workload, KeyNames) {
  EXPECT_EQ(key_name(0), "user00000000");
  EXPECT_EQ(key_name(1234), "user00001234");
}

TEST(Config, ParsesKeysAndComments) {
  std::istringstream in(
      "# comment\n"
      "workers = 3\n"
      "epoch_ms = 20   # trailing\n"
      "loss = 0.1\n"
      "delay_ms_min = 0.5\n"
      "delay_ms_max = 2\n"
      "capsuledb = true\n"
      "ops = 77\n"
      "read_fraction = 0.25\n");
  RunConfig run;
  WorkloadSpec work;
  parse_config(in, run, work);
  EXPECT_EQ(run.workers, 3u);
  EXPECT_DOUBLE_EQ(run.epoch_ms, 20);
  EXPECT_DOUBLE_EQ(run.link.loss, 0.1);
  EXPECT_EQ(run.link.delay_min, 500);
  EXPECT_EQ(run.link.delay_max, 2000);
  EXPECT_TRUE(run.capsuledb);
  EXPECT_EQ(work.op_count, 77u);
  EXPECT_DOUBLE_EQ(work.read_fraction, 0.25);
}

void expect_bad(const std::string& text) {
  std::istringstream in(text);
  RunConfig run;
  WorkloadSpec work;
  EXPECT_THROW(parse_config(in, run, work), ConfigError) << text;
}

TEST(Config, Errors) {
  expect_bad("workers 3\n");
  expect_bad("nonsense = 1\n");
  expect_bad("workers = 0\n");
  expect_bad("workers = -2\n");
  expect_bad("workers = 2.5\n");
  expect_bad("loss = 1.5\n");
  expect_bad("loss = abc\n");
  expect_bad("delay_ms_min = 5\ndelay_ms_max = 1\n");
  expect_bad("capsuledb = maybe\n");
  expect_bad("read_fraction = 2\n");
  expect_bad("topology = /nonexistent/topo.txt\n");
}

TEST(Config, ProtocolDerivesTimersFromEpoch) {
  RunConfig run;
  run.epoch_ms = 40;
  auto p = run.protocol();
  EXPECT_EQ(p.epoch, 40'000);
  EXPECT_EQ(p.recovery_retry, 5'000);
  EXPECT_EQ(p.get_timeout, 40'000);
}

ScenarioReport small_run(std::size_t workers, std::size_t ops, double reads = 0, std::size_t f = 0,
                         bool db = false, bool cached = true) {
  RunConfig run;
  run.workers = workers;
  run.replication_f = f;
  run.capsuledb = db;
  run.cache_gets = cached;
  WorkloadSpec w;
  w.op_count = ops;
  w.read_fraction = reads;
  return run_scenario(run, w);
}

TEST(Scenario, LosslessRunIsCoherent) {
  auto r = small_run(3, 600, 0.2, 0, true);
  EXPECT_TRUE(r.converged);
  EXPECT_TRUE(r.audit.ok()) << r.audit.divergence;
  EXPECT_EQ(r.ops, 600u);
  EXPECT_EQ(r.stale_drops, 0u);
}

TEST(Scenario, MoreWorkersMoreThroughput) {
  auto a = small_run(2, 4000), b = small_run(6, 4000);
  EXPECT_TRUE(a.audit.ok());
  EXPECT_TRUE(b.audit.ok());
  EXPECT_GT(b.throughput, a.throughput);
}

TEST(Scenario, ReplicationCostsThroughput) {
  auto plain = small_run(4, 2000), rep = small_run(4, 2000, 0, 1);
  EXPECT_TRUE(rep.audit.ok()) << rep.audit.divergence;
  EXPECT_LE(rep.throughput, plain.throughput);
}

TEST(Scenario, UncachedGetsAreSlower) {
  auto cached = small_run(4, 400, 0.5, 0, true, true), uncached = small_run(4, 400, 0.5, 0, true, false);
  EXPECT_TRUE(uncached.audit.ok()) << uncached.audit.divergence;
  EXPECT_LT(uncached.throughput, cached.throughput);
}

TEST(Scenario, JsonReportHasFields) {
  auto r = small_run(2, 200);
  auto j = to_json(r);
  for (const char* k : {"workers", "throughput", "latency_ms", "p99", "settle_epochs", "quiesce_epochs"})
    EXPECT_NE(j.find(k), std::string::npos) << k;
}

}  // namespace
}  // namespace scl::harness
