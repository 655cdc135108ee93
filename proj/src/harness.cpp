#include "scl/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <sstream>

#include "json.hpp"

namespace scl::harness {

using proto::Micros;
using proto::kMs;

// ---- workload ------------------------------------------------------------

ZipfGenerator::ZipfGenerator(std::size_t n, double theta) {
  if (n == 0) throw ConfigError("key_space must be positive");
  if (!(theta >= 0)) throw ConfigError("zipf exponent must be non-negative");
  cdf_.resize(n);
  double sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sum += 1.0 / std::pow(static_cast<double>(i + 1), theta);
    cdf_[i] = sum;
  }
  for (auto& c : cdf_) c /= sum;
  cdf_.back() = 1.0;
}

std::size_t ZipfGenerator::next(std::mt19937_64& rng) const {
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
  return std::min<std::size_t>(static_cast<std::size_t>(it - cdf_.begin()), cdf_.size() - 1);
}

double ZipfGenerator::mass(std::size_t rank) const { return rank == 0 ? cdf_[0] : cdf_.at(rank) - cdf_[rank - 1]; }

std::string key_name(std::size_t rank) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "user%08zu", rank);
  return buf;
}

std::vector<proto::Op> gen_workload(const WorkloadSpec& spec) {
  if (!(spec.read_fraction >= 0 && spec.read_fraction <= 1)) throw ConfigError("read_fraction must be in [0,1]");
  if (spec.value_bytes == 0) throw ConfigError("value_bytes must be positive");
  ZipfGenerator zipf(spec.key_space, spec.zipf);
  std::mt19937_64 rng(spec.seed);
  std::vector<proto::Op> ops;
  ops.reserve(spec.op_count);
  for (std::size_t i = 0; i < spec.op_count; ++i) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    proto::Op op;
    op.kind = u < spec.read_fraction ? proto::OpKind::kGet : proto::OpKind::kPut;
    op.key = key_name(zipf.next(rng));
    if (op.kind == proto::OpKind::kPut) {
      op.value.resize(spec.value_bytes);
      for (auto& c : op.value) c = static_cast<std::uint8_t>('a' + rng() % 26);
    }
    ops.push_back(std::move(op));
  }
  return ops;
}

// ---- config ----------------------------------------------------------------

void RunConfig::validate() const {
  if (workers == 0) throw ConfigError("workers must be positive");
  if (actors == 0) throw ConfigError("actors must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(epoch_ms > 0)) throw ConfigError("epoch_ms must be positive");
  if (!(link.loss >= 0 && link.loss <= 1)) throw ConfigError("loss must be in [0,1]");
  if (link.delay_min < 0 || link.delay_max < link.delay_min) throw ConfigError("bad delay range");
  if (retry_budget < 0) throw ConfigError("retry_budget must be non-negative");
  if (!(failover_mult > 0)) throw ConfigError("failover_mult must be positive");
  if (db_memtable_cap == 0) throw ConfigError("db_memtable_cap must be positive");
  if (!topology_file.empty() && !std::filesystem::exists(topology_file))
    throw ConfigError("topology file not found: " + topology_file.string());
}

proto::ProtocolConfig RunConfig::protocol() const {
  proto::ProtocolConfig p;
  p.epoch = static_cast<Micros>(epoch_ms * kMs);
  p.window = window;
  p.retry_budget = retry_budget;
  p.recovery_retry = std::max<Micros>(p.epoch / 8, 1);
  p.failover_mult = failover_mult;
  p.batch_size = batch_size;
  p.batch_timeout = std::max<Micros>(p.epoch / 10, 1);
  p.get_timeout = std::max<Micros>(p.epoch, 1);
  p.cache_gets = cache_gets;
  p.replication_f = replication_f;
  p.replication_resend = std::max<Micros>(p.epoch / 2, 1);
  p.db.memtable_cap = db_memtable_cap;
  p.cost = cost;
  return p;
}

namespace {

std::string trim(std::string s) {
  auto b = s.find_first_not_of(" \t\r");
  auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

double to_double(const std::string& k, const std::string& v) {
  try {
    std::size_t pos = 0;
    double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("bad number for " + k + ": " + v);
  }
}

std::uint64_t to_uint(const std::string& k, const std::string& v) {
  double d = to_double(k, v);
  if (d < 0 || d != std::floor(d)) throw ConfigError("expected a non-negative integer for " + k);
  return static_cast<std::uint64_t>(d);
}

bool to_bool(const std::string& k, const std::string& v) {
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw ConfigError("bad boolean for " + k + ": " + v);
}

}  // namespace

void parse_config(std::istream& in, RunConfig& run, WorkloadSpec& work, const std::filesystem::path& base) {
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto c = line.find('#'); c != std::string::npos) line.resize(c);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string k = trim(line.substr(0, eq));
    const std::string v = trim(line.substr(eq + 1));
    if (k == "workers") run.workers = to_uint(k, v);
    else if (k == "actors") run.actors = to_uint(k, v);
    else if (k == "batch_size") run.batch_size = to_uint(k, v);
    else if (k == "epoch_ms") run.epoch_ms = to_double(k, v);
    else if (k == "topology") run.topology_file = std::filesystem::path(v).is_absolute() ? std::filesystem::path(v) : base / v;
    else if (k == "loss") run.link.loss = to_double(k, v);
    else if (k == "delay_ms_min") run.link.delay_min = static_cast<Micros>(to_double(k, v) * kMs);
    else if (k == "delay_ms_max") run.link.delay_max = static_cast<Micros>(to_double(k, v) * kMs);
    else if (k == "reorder") run.link.reorder = to_bool(k, v);
    else if (k == "replication_f") run.replication_f = to_uint(k, v);
    else if (k == "replication") run.replication_f = to_bool(k, v) ? std::max<std::size_t>(run.replication_f, 1) : 0;
    else if (k == "capsuledb") run.capsuledb = to_bool(k, v);
    else if (k == "cache_gets") run.cache_gets = to_bool(k, v);
    else if (k == "shadows") run.shadows = to_uint(k, v);
    else if (k == "seed") run.seed = to_uint(k, v);
    else if (k == "window") run.window = to_uint(k, v);
    else if (k == "retry_budget") run.retry_budget = static_cast<int>(to_uint(k, v));
    else if (k == "failover_mult") run.failover_mult = to_double(k, v);
    else if (k == "max_drain_epochs") run.max_drain_epochs = to_uint(k, v);
    else if (k == "db_memtable_cap") run.db_memtable_cap = to_uint(k, v);
    else if (k == "kill_coordinator_at_ms") run.kill_coordinator_at_ms = to_double(k, v);
    else if (k == "revive_coordinator_at_ms") run.revive_coordinator_at_ms = to_double(k, v);
    else if (k == "trace") run.trace_file = v;
    else if (k == "ops") work.op_count = to_uint(k, v);
    else if (k == "read_fraction") work.read_fraction = to_double(k, v);
    else if (k == "key_space") work.key_space = to_uint(k, v);
    else if (k == "zipf") work.zipf = to_double(k, v);
    else if (k == "value_bytes") work.value_bytes = to_uint(k, v);
    else if (k == "workload_seed") work.seed = to_uint(k, v);
    else throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + k + "'");
  }
  run.validate();
  if (!(work.read_fraction >= 0 && work.read_fraction <= 1)) throw ConfigError("read_fraction must be in [0,1]");
}

// ---- scenario ----------------------------------------------------------------

namespace {

sim::Topology build_topology(const RunConfig& cfg) {
  if (!cfg.topology_file.empty()) {
    std::ifstream in(cfg.topology_file);
    if (!in) throw ConfigError("cannot read topology " + cfg.topology_file.string());
    auto t = sim::Topology::parse(in);
    t.validate();
    return t;
  }
  sim::DefaultTopologySpec spec;
  spec.workers = cfg.workers;
  spec.coordinators = 1 + cfg.shadows;
  spec.capsuledb = cfg.capsuledb;
  spec.durability = cfg.replication_f == 0 ? 0 : 2 * cfg.replication_f + 1;
  spec.link = cfg.link;
  return sim::default_topology(spec);
}

std::pair<std::string, std::string> describe(const Bytes& msg) {
  try {
    if (msg.empty()) return {"?", ""};
    if (msg[0] == static_cast<std::uint8_t>(proto::Wire::kAck)) return {"ACK", ""};
    auto r = parse_record(ByteView(msg).subspan(1));
    return {to_string(r.header.msg_type), hash_prefix(r.record_hash)};
  } catch (const std::exception&) {
    return {"?", ""};
  }
}

double percentile(std::vector<Micros> v, double p) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  auto idx = static_cast<std::size_t>(std::ceil(p * static_cast<double>(v.size()))) ;
  idx = std::clamp<std::size_t>(idx, 1, v.size()) - 1;
  return static_cast<double>(v[idx]) / kMs;
}

}  // namespace

Scenario::Scenario(RunConfig cfg, const WorkloadSpec& spec)
    : cfg_(std::move(cfg)), owner_(KeyNode::master_from_seed(Bytes(32, static_cast<std::uint8_t>(cfg_.seed)))) {
  cfg_.validate();
  auto topo = build_topology(cfg_);
  const auto worker_nodes = topo.of_kind(sim::NodeKind::kWorker);
  const auto coord_nodes = topo.of_kind(sim::NodeKind::kCoordinator);
  const auto db_nodes = topo.of_kind(sim::NodeKind::kCapsuleDb);
  const auto dur_nodes = topo.of_kind(sim::NodeKind::kDurability);
  if (worker_nodes.empty()) throw ConfigError("topology has no workers");
  if (coord_nodes.empty()) throw ConfigError("topology has no coordinator");
  cfg_.workers = worker_nodes.size();
  // The durability nodes present decide f: n = 2f+1.
  cfg_.replication_f = dur_nodes.empty() ? 0 : (dur_nodes.size() - 1) / 2;

  const std::size_t total = worker_nodes.size() + db_nodes.size() + coord_nodes.size() + dur_nodes.size();
  prov_ = provision_workers(owner_, 0, static_cast<std::uint32_t>(total));
  ring_ = std::make_unique<KeyRing>(prov_.app_public);
  net_ = std::make_unique<sim::SimNet>(std::move(topo), cfg_.seed);
  ctx_ = std::make_unique<proto::Context>(*net_, cfg_.protocol());
  ctx_->group = prov_.workers.front().group_key;
  ctx_->app_public = encode_public_node(prov_.app_public);
  ctx_->keys = [ring = ring_.get(), total](std::uint64_t s, std::uint64_t e) -> const crypto::PublicKey* {
    return s < total ? &ring->verify_key(s, e) : nullptr;
  };

  auto ops = gen_workload(spec);
  std::vector<std::vector<proto::Op>> shares(worker_nodes.size());
  for (std::size_t i = 0; i < ops.size(); ++i) shares[i % shares.size()].push_back(std::move(ops[i]));

  std::uint64_t id = 0;
  auto& dir = ctx_->dir;
  auto sk = [this](std::uint64_t s) -> const crypto::PrivateKey& { return *prov_.workers.at(s).node.private_key; };
  for (std::size_t i = 0; i < worker_nodes.size(); ++i, ++id) {
    dir.node_of[id] = worker_nodes[i];
    dir.writers.insert(id);
    workers_.push_back(std::make_unique<proto::WorkerNode>(*ctx_, worker_nodes[i], id, sk(id), std::move(shares[i])));
    net_->attach(worker_nodes[i], workers_.back().get());
  }
  if (!db_nodes.empty()) {
    dir.node_of[id] = db_nodes.front();
    dir.writers.insert(id);
    dir.capsuledb = id;
    db_ = std::make_unique<proto::DbNode>(*ctx_, db_nodes.front(), id, sk(id));
    net_->attach(db_nodes.front(), db_.get());
    id += db_nodes.size();
  }
  for (std::size_t i = 0; i < coord_nodes.size(); ++i, ++id) {
    dir.node_of[id] = coord_nodes[i];
    dir.coordinators.insert(id);
    coords_.push_back(std::make_unique<proto::CoordinatorNode>(*ctx_, coord_nodes[i], id, sk(id), i));
    net_->attach(coord_nodes[i], coords_.back().get());
  }
  for (std::size_t i = 0; i < dur_nodes.size(); ++i, ++id) {
    dir.node_of[id] = dur_nodes[i];
    dir.replicas.push_back(id);
    replicas_.push_back(std::make_unique<proto::DurabilityNode>(*ctx_, dur_nodes[i], id, sk(id)));
    net_->attach(dur_nodes[i], replicas_.back().get());
  }

  if (!cfg_.trace_file.empty()) {
    trace_ = std::make_unique<std::ofstream>(cfg_.trace_file);
    net_->set_trace(trace_.get(), describe);
  }
}

Scenario::~Scenario() = default;

void Scenario::start() {
  for (auto& c : coords_) c->start();
  for (auto& w : workers_) w->start();
}

void Scenario::run_epochs(std::size_t n) {
  const Micros epoch = ctx_->cfg.epoch;
  for (std::size_t i = 0; i < n; ++i) {
    Micros target = net_->now() + epoch;
    // Scripted coordinator faults land exactly on their instant.
    for (double at : {cfg_.kill_coordinator_at_ms, cfg_.revive_coordinator_at_ms}) {
      if (at < 0) continue;
      const auto t = static_cast<Micros>(at * kMs);
      if (t > net_->now() && t <= target) {
        net_->run_until(t);
        if (at == cfg_.kill_coordinator_at_ms) {
          net_->kill(ctx_->dir.node_of.at(coords_.front()->sender_id()));
        } else {
          const auto node = ctx_->dir.node_of.at(coords_.front()->sender_id());
          net_->revive(node);
          coords_.front()->restart();
        }
      }
    }
    net_->run_until(target);
  }
}

bool Scenario::run_workload(std::size_t max_epochs) {
  for (std::size_t i = 0; i < max_epochs; ++i) {
    bool done = std::all_of(workers_.begin(), workers_.end(),
                            [this](const auto& w) { return w->finished() || !alive(w->node()); });
    if (done) return true;
    run_epochs(1);
  }
  return false;
}

std::map<Bytes, StoredValue> Scenario::oracle() const {
  std::map<Bytes, StoredValue> m;
  for (const auto& u : ctx_->log.updates) {
    auto it = m.find(u.key);
    if (it == m.end() || newer(u.lamport_ts, u.sender_id, it->second.lamport_ts, it->second.sender_id))
      m[u.key] = {u.value, u.lamport_ts, u.sender_id};
  }
  return m;
}

bool Scenario::quiescent_now() const {
  auto clean = [](const proto::ReplicaNode& r) { return !r.chain().has_uncovered_writes(r.sender_id()); };
  for (const auto& w : workers_) {
    if (!net_->alive(w->node())) continue;
    if (!w->finished() || !clean(*w)) return false;
  }
  return !db_ || !net_->alive(db_->node()) || clean(*db_);
}

bool Scenario::converged_now() const {
  const auto want = oracle();
  std::vector<const proto::ReplicaNode*> reps;
  for (const auto& w : workers_) {
    if (!net_->alive(w->node())) continue;
    if (w->memtable().snapshot() != want) return false;
    reps.push_back(w.get());
  }
  if (db_ && net_->alive(db_->node())) reps.push_back(db_.get());
  // Same writes everywhere, nothing dangling. SYNC records are not compared:
  // a replica that slept through an epoch may never see that epoch's SYNC.
  auto data_set = [](const CapsuleChain& c) {
    std::set<Hash> s;
    for (const auto* r : c.topological_order())
      if (r->header.msg_type == MsgType::kData) s.insert(r->record_hash);
    return s;
  };
  std::optional<std::set<Hash>> first;
  for (const auto* r : reps) {
    if (r->chain().orphan_count() != 0) return false;
    auto s = data_set(r->chain());
    if (!first) first = std::move(s);
    else if (s != *first) return false;
  }
  if (db_) {
    auto& db = db_->db();
    for (const auto& [k, v] : want) {
      auto got = db.get(k);
      if (!got || got->value != v.value || got->lamport_ts != v.lamport_ts || got->sender_id != v.sender_id)
        return false;
    }
  }
  return true;
}

std::optional<std::size_t> Scenario::drain() {
  std::size_t k = 0;
  while (!quiescent_now()) {
    if (k++ >= cfg_.max_drain_epochs) return std::nullopt;
    run_epochs(1);
  }
  quiesce_epochs_ = k;
  for (std::size_t j = 1; j <= cfg_.max_drain_epochs; ++j) {
    run_epochs(1);
    if (converged_now()) {
      settle_epochs_ = j;
      converged_ = true;
      return j;
    }
  }
  settle_epochs_ = cfg_.max_drain_epochs;
  return std::nullopt;
}

Audit Scenario::audit() const {
  Audit a;
  std::ostringstream diff;
  const auto want = oracle();
  std::vector<const proto::WorkerNode*> live;
  for (const auto& w : workers_)
    if (net_->alive(w->node())) live.push_back(w.get());

  a.memtables_equal = true;
  a.coherent = true;
  const auto first = live.empty() ? std::map<Bytes, StoredValue>{} : live.front()->memtable().snapshot();
  for (const auto* w : live) {
    auto snap = w->memtable().snapshot();
    if (snap != first) {
      a.memtables_equal = false;
      diff << "worker " << w->sender_id() << " differs from worker " << live.front()->sender_id() << "\n";
    }
    if (snap != want) {
      a.coherent = false;
      std::size_t shown = 0;
      for (const auto& [k, v] : want) {
        auto it = snap.find(k);
        if (it == snap.end() || it->second != v) {
          if (shown++ < 3)
            diff << "worker " << w->sender_id() << " key " << to_string(k) << ": have "
                 << (it == snap.end() ? std::string("nothing")
                                      : "ts=" + std::to_string(it->second.lamport_ts) + " sender=" +
                                            std::to_string(it->second.sender_id))
                 << ", oracle ts=" << v.lamport_ts << " sender=" << v.sender_id << "\n";
        }
      }
      if (snap.size() != want.size())
        diff << "worker " << w->sender_id() << " holds " << snap.size() << " keys, oracle " << want.size() << "\n";
    }
  }

  a.chains_authentic = true;
  for (const auto* w : live) {
    auto rep = authenticate_chain(w->chain(), ctx_->keys);
    if (!rep.valid()) {
      a.chains_authentic = false;
      diff << "worker " << w->sender_id() << " chain: " << rep.failures.size() << " failures, first: "
           << rep.failures.front().reason << "\n";
    }
  }

  if (db_) {
    auto& db = const_cast<proto::DbNode&>(*db_).db();
    for (const auto& [k, v] : want) {
      auto got = db.get(k);
      if (!got || got->value != v.value || got->lamport_ts != v.lamport_ts || got->sender_id != v.sender_id) {
        if (a.db_equivalent) diff << "capsuledb key " << to_string(k) << " disagrees with oracle\n";
        a.db_equivalent = false;
      }
    }
    auto rep = authenticate_chain(db_->chain(), ctx_->keys);
    if (!rep.valid()) {
      a.chains_authentic = false;
      diff << "capsuledb chain: " << rep.failures.size() << " failures\n";
    }
  }
  a.divergence = diff.str();
  return a;
}

ScenarioReport Scenario::report() const {
  const auto& m = ctx_->metrics;
  ScenarioReport r;
  r.workers = workers_.size();
  r.ops = m.ops_done;
  const Micros span = m.first_issue < 0 ? 0 : m.last_done - m.first_issue;
  r.sim_seconds = static_cast<double>(span) / 1e6;
  r.throughput = span > 0 ? static_cast<double>(m.ops_done) / r.sim_seconds : 0;
  r.p50_ms = percentile(m.latencies, 0.50);
  r.p95_ms = percentile(m.latencies, 0.95);
  r.p99_ms = percentile(m.latencies, 0.99);
  r.records = m.records_sealed;
  r.epochs = m.syncs.size();
  r.recoveries = m.recovered;
  r.recovery_requests = m.recovery_requests;
  r.stale_drops = m.stale_drops;
  for (const auto& s : m.syncs) r.suspected += s.suspected;
  r.get_timeouts = m.get_timeouts;
  r.quiesce_epochs = quiesce_epochs_;
  r.settle_epochs = settle_epochs_;
  r.converged = converged_;
  r.audit = audit();
  return r;
}

ScenarioReport run_scenario(const RunConfig& cfg, const WorkloadSpec& spec) {
  Scenario s(cfg, spec);
  s.start();
  s.run_workload();
  s.drain();
  return s.report();
}

std::string to_json(const ScenarioReport& r) {
  nlohmann::ordered_json j;
  j["workers"] = r.workers;
  j["ops"] = r.ops;
  j["sim_seconds"] = r.sim_seconds;
  j["throughput"] = r.throughput;
  j["latency_ms"] = {{"p50", r.p50_ms}, {"p95", r.p95_ms}, {"p99", r.p99_ms}};
  j["records"] = r.records;
  j["epochs"] = r.epochs;
  j["recoveries"] = r.recoveries;
  j["recovery_requests"] = r.recovery_requests;
  j["stale_drops"] = r.stale_drops;
  j["suspected"] = r.suspected;
  j["get_timeouts"] = r.get_timeouts;
  j["quiesce_epochs"] = r.quiesce_epochs;
  j["settle_epochs"] = r.settle_epochs;
  j["converged"] = r.converged;
  j["audit"] = {{"memtables_equal", r.audit.memtables_equal},
                {"coherent", r.audit.coherent},
                {"chains_authentic", r.audit.chains_authentic},
                {"db_equivalent", r.audit.db_equivalent}};
  if (!r.audit.ok()) j["divergence"] = r.audit.divergence;
  return j.dump();
}

}  // namespace scl::harness
