#pragma once

// Workload generation and whole-system scenarios on the simulator: boot the
// topology, drive the ops, drain epochs, then audit convergence.

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <random>
#include <string>

#include "scl/epoch_coordinator.hpp"
#include "scl/keymgmt.hpp"

namespace scl::harness {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct WorkloadSpec {
  std::size_t op_count = 1000;
  double read_fraction = 0.0;
  std::size_t key_space = 1000;
  double zipf = 0.99;
  std::size_t value_bytes = 100;
  std::uint64_t seed = 1;
};

/// Rank 0 is the hottest key. P(rank r) is proportional to 1/(r+1)^theta.
class ZipfGenerator {
 public:
  ZipfGenerator(std::size_t n, double theta);
  std::size_t next(std::mt19937_64& rng) const;
  /// Exact probability mass of `rank`.
  double mass(std::size_t rank) const;

 private:
  std::vector<double> cdf_;
};

std::string key_name(std::size_t rank);  // "user%08zu"
std::vector<proto::Op> gen_workload(const WorkloadSpec& spec);

struct RunConfig {
  std::size_t workers = 5;
  std::size_t actors = 4;  // pipeline bench only
  std::size_t batch_size = 10;
  double epoch_ms = 50;
  std::filesystem::path topology_file;  // empty: default tree
  sim::LinkProfile link{0.0, 200, 1000, true};
  std::size_t replication_f = 0;  // n = 2f+1 durability nodes; 0 is off
  bool capsuledb = false;
  bool cache_gets = true;
  std::size_t shadows = 1;
  std::uint64_t seed = 1;
  std::uint64_t window = 1;
  int retry_budget = 3;
  double failover_mult = 3.0;
  std::size_t max_drain_epochs = 200;
  std::size_t db_memtable_cap = 64;
  double kill_coordinator_at_ms = -1;
  double revive_coordinator_at_ms = -1;
  std::filesystem::path trace_file;
  proto::CostModel cost;

  void validate() const;
  proto::ProtocolConfig protocol() const;
};

/// Plain `key = value` lines, '#' comments. Covers RunConfig and WorkloadSpec
/// fields; unknown keys are errors. Relative topology paths resolve against `base`.
void parse_config(std::istream& in, RunConfig& run, WorkloadSpec& work, const std::filesystem::path& base = {});

struct Audit {
  bool memtables_equal = false;  // every live worker identical
  bool coherent = false;         // and equal to the replay oracle
  bool chains_authentic = false;
  bool db_equivalent = true;     // vacuous without a CapsuleDB node
  std::string divergence;        // first differences, human readable
  bool ok() const { return memtables_equal && coherent && chains_authentic && db_equivalent; }
};

struct ScenarioReport {
  std::size_t workers = 0;
  std::uint64_t ops = 0;
  double sim_seconds = 0;
  double throughput = 0;  // ops per virtual second
  double p50_ms = 0, p95_ms = 0, p99_ms = 0;
  std::uint64_t records = 0;
  std::uint64_t epochs = 0;
  std::uint64_t recoveries = 0;
  std::uint64_t recovery_requests = 0;
  std::uint64_t stale_drops = 0;
  std::uint64_t suspected = 0;  // SYNC entries carried forward
  std::uint64_t get_timeouts = 0;
  std::size_t quiesce_epochs = 0;  // epochs until writes were covered
  std::size_t settle_epochs = 0;   // further epochs until replicas converged
  bool converged = false;
  Audit audit;
};

std::string to_json(const ScenarioReport& r);

/// One booted system. Tests reach into the nodes; run_scenario drives it end to end.
class Scenario {
 public:
  Scenario(RunConfig cfg, const WorkloadSpec& spec);
  ~Scenario();

  void start();
  /// Runs until every live worker has finished its ops. False on timeout.
  bool run_workload(std::size_t max_epochs = 100'000);
  /// Epoch-steps until writes are quiescent, then until every replica has
  /// converged. Returns the epochs needed after quiescence (1 is the
  /// best case), or nullopt past the cap.
  std::optional<std::size_t> drain();
  /// Every live writer is done and its last record is covered by a SYNC it
  /// adopted.
  bool quiescent_now() const;
  /// Replica state agrees: memtables equal the oracle, DATA records equal,
  /// no orphans, CapsuleDB answers like the oracle.
  bool converged_now() const;
  Audit audit() const;
  ScenarioReport report() const;

  sim::SimNet& net() { return *net_; }
  proto::Context& ctx() { return *ctx_; }
  const RunConfig& config() const { return cfg_; }
  std::vector<std::unique_ptr<proto::WorkerNode>>& workers() { return workers_; }
  std::vector<std::unique_ptr<proto::CoordinatorNode>>& coordinators() { return coords_; }
  proto::DbNode* db() { return db_.get(); }
  std::vector<std::unique_ptr<proto::DurabilityNode>>& replicas() { return replicas_; }
  /// Latest value per key by (lamport_ts, sender_id), by brute force over every put.
  std::map<Bytes, StoredValue> oracle() const;
  void run_epochs(std::size_t n);

 private:
  bool alive(proto::NodeId n) const { return net_->alive(n); }

  RunConfig cfg_;
  KeyNode owner_;
  Provisioning prov_;
  std::unique_ptr<KeyRing> ring_;
  std::unique_ptr<sim::SimNet> net_;
  std::unique_ptr<proto::Context> ctx_;
  std::vector<std::unique_ptr<proto::WorkerNode>> workers_;
  std::vector<std::unique_ptr<proto::CoordinatorNode>> coords_;
  std::unique_ptr<proto::DbNode> db_;
  std::vector<std::unique_ptr<proto::DurabilityNode>> replicas_;
  std::unique_ptr<std::ofstream> trace_;
  std::size_t quiesce_epochs_ = 0;
  std::size_t settle_epochs_ = 0;
  bool converged_ = false;
};

ScenarioReport run_scenario(const RunConfig& cfg, const WorkloadSpec& spec);

}  // namespace scl::harness
