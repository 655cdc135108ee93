// scl: benches, simulator runs and capsule inspection.

#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "scl/capsule_chain.hpp"
#include "scl/crypto_actors.hpp"
#include "scl/enclave_channel.hpp"
#include "scl/harness.hpp"

namespace {

using namespace scl;
using harness::RunConfig;
using harness::WorkloadSpec;

void print_report(const harness::ScenarioReport& r, bool csv, bool header, const char* label = nullptr,
                  const std::string& label_value = {}) {
  if (!csv) {
    std::cout << harness::to_json(r) << '\n';
    return;
  }
  if (header)
    std::cout << (label ? std::string(label) + "," : "")
              << "workers,ops,sim_seconds,throughput,p50_ms,p95_ms,p99_ms,records,epochs,recoveries,stale_drops,"
                 "settle_epochs,audit_ok\n";
  if (label) std::cout << label_value << ',';
  std::cout << r.workers << ',' << r.ops << ',' << r.sim_seconds << ',' << r.throughput << ',' << r.p50_ms << ','
            << r.p95_ms << ',' << r.p99_ms << ',' << r.records << ',' << r.epochs << ',' << r.recoveries << ','
            << r.stale_drops << ',' << r.settle_epochs << ',' << (r.audit.ok() ? 1 : 0) << '\n';
}

void load_config(const std::string& path, RunConfig& run, WorkloadSpec& work) {
  std::ifstream in(path);
  if (!in) throw harness::ConfigError("cannot open config " + path);
  harness::parse_config(in, run, work, std::filesystem::path(path).parent_path());
}

int run_sim(const std::string& config, bool csv, const std::string& dump, const std::string& trace) {
  RunConfig run;
  WorkloadSpec work;
  load_config(config, run, work);
  if (!trace.empty()) run.trace_file = trace;
  harness::Scenario s(run, work);
  s.start();
  s.run_workload();
  s.drain();
  auto r = s.report();
  print_report(r, csv, true);
  if (!dump.empty()) {
    std::ofstream out(dump, std::ios::binary);
    s.workers().front()->chain().dump(out);
    std::cerr << "capsule of worker 0 written to " << dump << "; app public node "
              << to_hex(s.ctx().app_public) << '\n';
  }
  if (!r.audit.ok()) {
    std::cerr << "convergence audit failed:\n" << r.audit.divergence;
    return 1;
  }
  return 0;
}

int dump_levels(const std::string& config, std::size_t memtable_cap) {
  RunConfig run;
  WorkloadSpec work;
  if (!config.empty()) load_config(config, run, work);
  run.capsuledb = true;
  if (memtable_cap) run.db_memtable_cap = memtable_cap;
  harness::Scenario s(run, work);
  s.start();
  s.run_workload();
  s.drain();
  s.db()->db().dump_levels(std::cout);
  const auto& st = s.db()->db().stats();
  std::cout << "flushes " << st.flushes << " compactions " << st.compactions << " checkpoints " << st.checkpoints
            << '\n';
  return 0;
}

int verify_capsule(const std::string& file, const std::string& app_public_hex, std::uint64_t seed) {
  std::ifstream in(file, std::ios::binary);
  if (!in) {
    std::cerr << "cannot open " << file << '\n';
    return 2;
  }
  KeyNode app;
  if (!app_public_hex.empty()) {
    Bytes raw;
    if (app_public_hex.size() % 2) throw ParseError("odd hex length");
    for (std::size_t i = 0; i < app_public_hex.size(); i += 2)
      raw.push_back(static_cast<std::uint8_t>(std::stoul(app_public_hex.substr(i, 2), nullptr, 16)));
    app = decode_public_node(raw);
  } else {
    // Same owner derivation the simulator uses for its run seed.
    app = provision_workers(KeyNode::master_from_seed(Bytes(32, static_cast<std::uint8_t>(seed))), 0, 1).app_public;
  }
  KeyRing ring(app);
  KeyResolver keys = [&ring](std::uint64_t s, std::uint64_t e) -> const crypto::PublicKey* {
    return s <= kMaxChildIndex ? &ring.verify_key(s, e) : nullptr;
  };
  auto records = read_record_stream(in);
  std::size_t bad = 0;
  for (const auto& r : records) {
    const auto* key = keys(r.header.sender_id, r.header.epoch_seq);
    auto st = key ? verify_record(r, *key) : VerifyStatus::kBadSignature;
    if (st != VerifyStatus::kOk) {
      ++bad;
      std::cout << "record " << hash_prefix(r.record_hash, 16) << " sender " << r.header.sender_id << ": "
                << to_string(st) << '\n';
    }
  }
  std::stringstream again;
  write_record_stream(again, records);
  MergeOutcome out;
  auto chain = CapsuleChain::load(again, keys, &out);
  auto rep = authenticate_chain(chain, keys);
  for (const auto& f : rep.failures) std::cout << "link " << hash_prefix(f.record_hash, 16) << ": " << f.reason << '\n';
  std::cout << "records " << records.size() << " signature_failures " << bad << " chain_failures "
            << rep.failures.size() << " heads " << chain.heads().size() << '\n';
  std::cout << (bad == 0 && rep.valid() ? "VALID" : "INVALID") << '\n';
  return bad == 0 && rep.valid() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"secure concurrency layer tools"};
  app.require_subcommand(1);

  // bench-e2e
  RunConfig e2e;
  WorkloadSpec e2e_work;
  e2e_work.op_count = 20000;
  std::size_t from = 2, to = 8;
  bool csv = false;
  std::string e2e_config;
  auto* be = app.add_subcommand("bench-e2e", "end-to-end simulated throughput across worker counts");
  be->add_option("--config", e2e_config, "base config file");
  be->add_option("--workers-from", from)->capture_default_str();
  be->add_option("--workers-to", to)->capture_default_str();
  be->add_option("--ops", e2e_work.op_count, "total ops per run")->capture_default_str();
  be->add_option("--read-fraction", e2e_work.read_fraction)->capture_default_str();
  be->add_option("--key-space", e2e_work.key_space)->capture_default_str();
  be->add_option("--value-bytes", e2e_work.value_bytes)->capture_default_str();
  be->add_option("--batch-size", e2e.batch_size)->capture_default_str();
  be->add_option("--epoch-ms", e2e.epoch_ms)->capture_default_str();
  be->add_option("--loss", e2e.link.loss)->capture_default_str();
  be->add_option("--replication-f", e2e.replication_f, "0 turns replication off")->capture_default_str();
  be->add_flag("--capsuledb", e2e.capsuledb);
  be->add_flag("!--uncached", e2e.cache_gets, "every get goes to the CapsuleDB node");
  be->add_option("--seed", e2e.seed)->capture_default_str();
  be->add_flag("--csv", csv);

  // bench-pipeline
  std::vector<std::size_t> actors{1, 4}, batches{1, 10, 100, 1000};
  std::uint64_t pipe_ops = 20000;
  std::size_t pipe_value = 100;
  auto* bp = app.add_subcommand("bench-pipeline", "memtable to actors to ring throughput (wall clock)");
  bp->add_option("--actors", actors)->capture_default_str();
  bp->add_option("--batches", batches)->capture_default_str();
  bp->add_option("--ops", pipe_ops)->capture_default_str();
  bp->add_option("--value-bytes", pipe_value)->capture_default_str();
  bp->add_flag("--csv", csv);

  // bench-ring
  std::vector<std::size_t> sizes{64, 4096};
  std::size_t ring_msgs = 200000;
  auto* br = app.add_subcommand("bench-ring", "ring buffer vs copy rendezvous per-message cost");
  br->add_option("--sizes", sizes)->capture_default_str();
  br->add_option("--msgs", ring_msgs)->capture_default_str();
  br->add_flag("--csv", csv);

  // verify-capsule
  std::string capsule_file, app_public;
  std::uint64_t verify_seed = 1;
  auto* vc = app.add_subcommand("verify-capsule", "check every signature and hash link of a capsule file");
  vc->add_option("file", capsule_file)->required();
  vc->add_option("--app-public", app_public, "hex 65-byte app public node");
  vc->add_option("--seed", verify_seed, "derive the app key from a simulator seed instead")->capture_default_str();

  // sim
  std::string sim_config, dump, trace;
  auto* sm = app.add_subcommand("sim", "run one simulated scenario from a config file");
  sm->add_option("config", sim_config)->required()->check(CLI::ExistingFile);
  sm->add_option("--dump-capsule", dump, "write worker 0's capsule here");
  sm->add_option("--trace", trace, "JSON-lines event trace");
  sm->add_flag("--csv", csv);

  // dump-levels
  std::string lv_config;
  std::size_t lv_cap = 0;
  auto* dl = app.add_subcommand("dump-levels", "run a scenario with a CapsuleDB node and print its level occupancy");
  dl->add_option("config", lv_config)->check(CLI::ExistingFile);
  dl->add_option("--memtable-cap", lv_cap);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*be) {
      if (!e2e_config.empty()) load_config(e2e_config, e2e, e2e_work);
      bool all_ok = true;
      for (std::size_t n = from; n <= to; ++n) {
        auto cfg = e2e;
        cfg.workers = n;
        auto r = harness::run_scenario(cfg, e2e_work);
        all_ok = all_ok && r.audit.ok();
        print_report(r, csv, n == from);
      }
      return all_ok ? 0 : 1;
    }
    if (*bp) {
      bool header = true;
      for (auto a : actors)
        for (auto b : batches) {
          auto row = pipeline_throughput({a, b}, pipe_ops, pipe_value);
          if (csv) {
            write_throughput_csv(std::cout, row, header);
          } else {
            nlohmann::ordered_json j{{"actors", row.actors},   {"batch_size", row.batch_size}, {"ops", row.ops},
                                     {"seconds", row.seconds}, {"ops_per_sec", row.ops_per_sec()}};
            std::cout << j.dump() << '\n';
          }
          header = false;
        }
      return 0;
    }
    if (*br) {
      bool header = true;
      for (auto s : sizes) {
        auto b = boundary_bench(ring_msgs, s);
        if (csv) {
          write_bench_csv(std::cout, b, header);
        } else {
          nlohmann::ordered_json j{{"msg_bytes", b.msg_bytes},
                                   {"msgs", b.msgs},
                                   {"ring_ns_per_msg", b.ring_ns_per_msg},
                                   {"baseline_ns_per_msg", b.baseline_ns_per_msg},
                                   {"speedup", b.baseline_ns_per_msg / b.ring_ns_per_msg}};
          std::cout << j.dump() << '\n';
        }
        header = false;
      }
      return 0;
    }
    if (*vc) return verify_capsule(capsule_file, app_public, verify_seed);
    if (*sm) return run_sim(sim_config, csv, dump, trace);
    if (*dl) return dump_levels(lv_config, lv_cap);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
