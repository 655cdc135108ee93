#include "scl/sim_net.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include "json.hpp"
#include <ostream>
#include <sstream>

namespace scl::sim {

const char* to_string(NodeKind k) {
  switch (k) {
    case NodeKind::kWorker: return "worker";
    case NodeKind::kCoordinator: return "coordinator";
    case NodeKind::kRouter: return "router";
    case NodeKind::kDurability: return "durability";
    case NodeKind::kAuthenticator: return "authenticator";
    case NodeKind::kCapsuleDb: return "capsuledb";
  }
  return "?";
}

std::optional<NodeKind> node_kind_from_string(std::string_view s) {
  for (auto k : {NodeKind::kWorker, NodeKind::kCoordinator, NodeKind::kRouter, NodeKind::kDurability,
                 NodeKind::kAuthenticator, NodeKind::kCapsuleDb})
    if (s == to_string(k)) return k;
  return std::nullopt;
}

NodeId Topology::add_node(std::string name, NodeKind kind) {
  if (find(name)) throw TopologyError("duplicate node " + name);
  nodes_.push_back({std::move(name), kind});
  return static_cast<NodeId>(nodes_.size() - 1);
}

void Topology::add_edge(NodeId a, NodeId b, LinkProfile p) {
  if (a >= nodes_.size() || b >= nodes_.size() || a == b) throw TopologyError("bad edge endpoints");
  if (p.loss < 0 || p.loss > 1) throw TopologyError("loss must be in [0,1]");
  if (p.delay_min < 0 || p.delay_max < p.delay_min) throw TopologyError("bad delay range");
  edges_.push_back({a, b, p});
}

void Topology::validate() const {
  const auto n = nodes_.size();
  if (n == 0) throw TopologyError("empty topology");
  if (edges_.size() != n - 1) throw TopologyError("a tree on n nodes has n-1 edges");
  std::vector<std::vector<NodeId>> adj(n);
  for (const auto& e : edges_) {
    adj[e.a].push_back(e.b);
    adj[e.b].push_back(e.a);
  }
  std::vector<bool> seen(n, false);
  std::vector<NodeId> stack{0};
  seen[0] = true;
  std::size_t count = 1;
  while (!stack.empty()) {
    auto v = stack.back();
    stack.pop_back();
    for (auto u : adj[v])
      if (!seen[u]) {
        seen[u] = true;
        ++count;
        stack.push_back(u);
      }
  }
  if (count != n) throw TopologyError("topology is not connected");
  for (NodeId v = 0; v < n; ++v)
    if (nodes_[v].kind != NodeKind::kRouter && adj[v].size() > 1)
      throw TopologyError("non-router node " + nodes_[v].name + " has several links");
}

std::optional<NodeId> Topology::find(std::string_view name) const {
  for (NodeId i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].name == name) return i;
  return std::nullopt;
}

std::vector<NodeId> Topology::of_kind(NodeKind k) const {
  std::vector<NodeId> out;
  for (NodeId i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].kind == k) out.push_back(i);
  return out;
}

void Topology::set_all_links(const LinkProfile& p) {
  for (auto& e : edges_) e.profile = p;
}

void Topology::set_link(std::size_t edge, const LinkProfile& p) { edges_.at(edge).profile = p; }

namespace {
double parse_double(const std::string& s, int line) {
  try {
    std::size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw TopologyError("line " + std::to_string(line) + ": bad number '" + s + "'");
  }
}
}  // namespace

Topology Topology::parse(std::istream& in) {
  Topology t;
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    if (auto h = raw.find('#'); h != std::string::npos) raw.resize(h);
    std::istringstream ls(raw);
    std::string word;
    if (!(ls >> word)) continue;
    auto where = [&] { return "line " + std::to_string(lineno) + ": "; };
    if (word == "node") {
      std::string name, kind;
      if (!(ls >> name >> kind)) throw TopologyError(where() + "node needs a name and a kind");
      auto k = node_kind_from_string(kind);
      if (!k) throw TopologyError(where() + "unknown node kind " + kind);
      t.add_node(name, *k);
    } else if (word == "edge") {
      std::string a, b;
      if (!(ls >> a >> b)) throw TopologyError(where() + "edge needs two endpoints");
      auto ia = t.find(a), ib = t.find(b);
      if (!ia || !ib) throw TopologyError(where() + "edge references an undeclared node");
      LinkProfile p;
      std::string kv;
      double dmin = 0, dmax = 0;
      while (ls >> kv) {
        auto eq = kv.find('=');
        if (eq == std::string::npos) throw TopologyError(where() + "expected key=value, got " + kv);
        auto key = kv.substr(0, eq), val = kv.substr(eq + 1);
        if (key == "loss") {
          p.loss = parse_double(val, lineno);
        } else if (key == "delay_ms_min") {
          dmin = parse_double(val, lineno);
        } else if (key == "delay_ms_max") {
          dmax = parse_double(val, lineno);
        } else if (key == "reorder") {
          if (val != "0" && val != "1") throw TopologyError(where() + "reorder is 0 or 1");
          p.reorder = val == "1";
        } else {
          throw TopologyError(where() + "unknown edge attribute " + key);
        }
      }
      if (dmax < dmin) dmax = dmin;
      p.delay_min = static_cast<Micros>(std::llround(dmin * kMs));
      p.delay_max = static_cast<Micros>(std::llround(dmax * kMs));
      try {
        t.add_edge(*ia, *ib, p);
      } catch (const TopologyError& e) {
        throw TopologyError(where() + e.what());
      }
    } else {
      throw TopologyError(where() + "unknown statement " + word);
    }
  }
  t.validate();
  return t;
}

void Topology::write(std::ostream& out) const {
  for (const auto& n : nodes_) out << "node " << n.name << ' ' << to_string(n.kind) << '\n';
  for (const auto& e : edges_)
    out << "edge " << nodes_[e.a].name << ' ' << nodes_[e.b].name << " loss=" << e.profile.loss
        << " delay_ms_min=" << static_cast<double>(e.profile.delay_min) / kMs
        << " delay_ms_max=" << static_cast<double>(e.profile.delay_max) / kMs
        << " reorder=" << (e.profile.reorder ? 1 : 0) << '\n';
}

Topology default_topology(const DefaultTopologySpec& spec) {
  Topology t;
  auto r0 = t.add_node("r0", NodeKind::kRouter);
  NodeId mid[2] = {t.add_node("r1", NodeKind::kRouter), t.add_node("r2", NodeKind::kRouter)};
  t.add_edge(r0, mid[0], spec.link);
  t.add_edge(r0, mid[1], spec.link);
  std::size_t next = 0;
  auto leaf = [&](std::string name, NodeKind k) {
    auto id = t.add_node(std::move(name), k);
    t.add_edge(mid[next++ % 2], id, spec.link);
  };
  for (std::size_t i = 0; i < spec.workers; ++i) leaf("w" + std::to_string(i), NodeKind::kWorker);
  for (std::size_t i = 0; i < spec.coordinators; ++i) leaf("c" + std::to_string(i), NodeKind::kCoordinator);
  if (spec.capsuledb) leaf("db", NodeKind::kCapsuleDb);
  for (std::size_t i = 0; i < spec.durability; ++i) leaf("d" + std::to_string(i), NodeKind::kDurability);
  t.validate();
  return t;
}

SimNet::SimNet(Topology topo, std::uint64_t seed) : topo_(std::move(topo)), rng_(seed) {
  topo_.validate();
  const auto n = topo_.nodes().size();
  adj_.resize(n);
  for (std::size_t i = 0; i < topo_.edges().size(); ++i) {
    const auto& e = topo_.edges()[i];
    adj_[e.a].emplace_back(e.b, i);
    adj_[e.b].emplace_back(e.a, i);
  }
  // next_hop_[from][to] via BFS from every destination.
  next_hop_.assign(n, std::vector<NodeId>(n, 0));
  for (NodeId dst = 0; dst < n; ++dst) {
    std::vector<bool> seen(n, false);
    std::queue<NodeId> q;
    q.push(dst);
    seen[dst] = true;
    next_hop_[dst][dst] = dst;
    while (!q.empty()) {
      auto v = q.front();
      q.pop();
      for (auto [u, _] : adj_[v])
        if (!seen[u]) {
          seen[u] = true;
          next_hop_[u][dst] = v;
          q.push(u);
        }
    }
  }
  endpoints_.assign(n, nullptr);
  alive_.assign(n, true);
  busy_.assign(n, 0);
}

void SimNet::attach(NodeId node, Endpoint* ep) { endpoints_.at(node) = ep; }

std::size_t SimNet::edge_index(NodeId a, NodeId b) const {
  for (auto [u, i] : adj_[a])
    if (u == b) return i;
  throw std::logic_error("no such link");
}

std::size_t SimNet::distance(NodeId a, NodeId b) const {
  std::size_t d = 0;
  while (a != b) {
    a = next_hop_[a][b];
    ++d;
  }
  return d;
}

void SimNet::push(Event e) {
  e.seq = seq_++;
  queue_.push(std::move(e));
}

void SimNet::send_hop(NodeId from, NodeId to, Micros depart, const Event& proto) {
  ++stats_.hops;
  const auto& p = topo_.edges()[edge_index(from, to)].profile;
  if (p.loss > 0 && std::uniform_real_distribution<double>(0.0, 1.0)(rng_) < p.loss) {
    ++stats_.hop_drops;
    return;
  }
  Micros delay = p.delay_min;
  if (p.delay_max > p.delay_min) delay = std::uniform_int_distribution<Micros>(p.delay_min, p.delay_max)(rng_);
  Micros t = depart + delay;
  if (!p.reorder) {
    auto& last = link_clock_[{from, to}];
    t = std::max(t, last);
    last = t;
  }
  Event e = proto;
  e.t = t;
  e.kind = EvKind::kHop;
  e.node = to;
  e.prev = from;
  push(std::move(e));
}

void SimNet::multicast(NodeId from, Bytes msg) {
  ++stats_.sends;
  Event proto{};
  proto.origin = from;
  proto.dest = kBroadcast;
  proto.msg = std::make_shared<const Bytes>(std::move(msg));
  trace("send", from, proto.msg.get());
  const Micros depart = std::max(now_, busy_[from]);
  for (auto [u, _] : adj_[from]) send_hop(from, u, depart, proto);
}

void SimNet::unicast(NodeId from, NodeId to, Bytes msg) {
  ++stats_.sends;
  if (from == to) return;
  Event proto{};
  proto.origin = from;
  proto.dest = to;
  proto.msg = std::make_shared<const Bytes>(std::move(msg));
  trace("send", from, proto.msg.get());
  send_hop(from, next_hop_[from][to], std::max(now_, busy_[from]), proto);
}

void SimNet::set_timer(NodeId node, Micros delay, std::uint64_t tag) {
  Event e{};
  e.t = now_ + std::max<Micros>(delay, 0);
  e.kind = EvKind::kTimer;
  e.node = node;
  e.tag = tag;
  push(std::move(e));
}

void SimNet::charge(NodeId node, Micros cost) { busy_.at(node) = std::max(busy_[node], now_) + cost; }

void SimNet::set_link(NodeId a, NodeId b, const LinkProfile& p) {
  topo_.set_link(edge_index(a, b), p);
}

void SimNet::kill(NodeId node) { alive_.at(node) = false; }
void SimNet::revive(NodeId node) {
  alive_.at(node) = true;
  busy_.at(node) = now_;
}

void SimNet::dispatch(Event e) {
  const auto& kind = topo_.nodes()[e.node].kind;
  if (e.kind == EvKind::kTimer) {
    if (!alive_[e.node] || !endpoints_[e.node]) return;
    if (busy_[e.node] > now_) {
      e.t = busy_[e.node];
      push(std::move(e));
      return;
    }
    endpoints_[e.node]->on_timer(e.tag);
    return;
  }
  if (kind == NodeKind::kRouter) {
    if (e.dest == kBroadcast) {
      for (auto [u, _] : adj_[e.node])
        if (u != e.prev) send_hop(e.node, u, now_, e);
    } else {
      send_hop(e.node, next_hop_[e.node][e.dest], now_, e);
    }
    return;
  }
  if (e.dest != kBroadcast && e.dest != e.node) return;
  if (!alive_[e.node]) {
    ++stats_.dead_drops;
    return;
  }
  if (!endpoints_[e.node]) return;
  if (busy_[e.node] > now_) {
    e.t = busy_[e.node];
    push(std::move(e));
    return;
  }
  if (filter_ && filter_(e.origin, e.node, *e.msg)) {
    ++stats_.hop_drops;
    return;
  }
  ++stats_.deliveries;
  trace("deliver", e.node, e.msg.get());
  endpoints_[e.node]->on_message(e.origin, *e.msg);
}

std::uint64_t SimNet::run_until(Micros t, std::uint64_t cap) {
  std::uint64_t n = 0;
  while (!queue_.empty() && queue_.top().t <= t) {
    if (++n > cap) throw LivelockDetected("event cap of " + std::to_string(cap) + " exceeded");
    Event e = queue_.top();
    queue_.pop();
    now_ = e.t;
    dispatch(std::move(e));
  }
  now_ = std::max(now_, t);
  return n;
}

std::uint64_t SimNet::run_until_quiescent(std::uint64_t cap) {
  std::uint64_t n = 0;
  while (!queue_.empty()) {
    if (++n > cap) throw LivelockDetected("event cap of " + std::to_string(cap) + " exceeded");
    Event e = queue_.top();
    queue_.pop();
    now_ = e.t;
    dispatch(std::move(e));
  }
  return n;
}

void SimNet::set_trace(std::ostream* out, Describe describe) {
  trace_ = out;
  describe_ = std::move(describe);
}

void SimNet::trace(const char* event, NodeId node, const Bytes* msg) {
  if (!trace_) return;
  nlohmann::json j;
  j["t"] = now_;
  j["event"] = event;
  j["node"] = topo_.nodes()[node].name;
  if (describe_ && msg) {
    auto [type, hash] = describe_(*msg);
    j["msg_type"] = type;
    j["hash"] = hash;
  } else {
    j["msg_type"] = nullptr;
    j["hash"] = nullptr;
  }
  *trace_ << j.dump() << '\n';
}

}  // namespace scl::sim
