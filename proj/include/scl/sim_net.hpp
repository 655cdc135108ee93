#pragma once

// Deterministic discrete-event model of the untrusted multicast tree.
// Routers flood along tree edges; every hop draws its own loss and delay.
// Time is virtual, in microseconds. One seed gives one event trace.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <queue>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "scl/bytes.hpp"

namespace scl::sim {

using NodeId = std::uint32_t;
using Micros = std::int64_t;

constexpr Micros kMs = 1000;

enum class NodeKind { kWorker, kCoordinator, kRouter, kDurability, kAuthenticator, kCapsuleDb };
const char* to_string(NodeKind k);
std::optional<NodeKind> node_kind_from_string(std::string_view s);

struct LinkProfile {
  double loss = 0.0;
  Micros delay_min = 0;
  Micros delay_max = 0;
  bool reorder = true;  // false: deliveries on this link keep send order

  friend bool operator==(const LinkProfile&, const LinkProfile&) = default;
};

struct TopoNode {
  std::string name;
  NodeKind kind = NodeKind::kWorker;
};

struct TopoEdge {
  NodeId a = 0;
  NodeId b = 0;
  LinkProfile profile;
};

class TopologyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Topology {
 public:
  NodeId add_node(std::string name, NodeKind kind);
  void add_edge(NodeId a, NodeId b, LinkProfile p);
  /// Tree, connected, and only routers have more than one link.
  void validate() const;

  const std::vector<TopoNode>& nodes() const { return nodes_; }
  const std::vector<TopoEdge>& edges() const { return edges_; }
  std::optional<NodeId> find(std::string_view name) const;
  std::vector<NodeId> of_kind(NodeKind k) const;
  /// Applies `p` to every edge.
  void set_all_links(const LinkProfile& p);
  void set_link(std::size_t edge, const LinkProfile& p);

  /// Plain-text form, one statement per line:
  ///   node <name> <worker|coordinator|router|durability|authenticator|capsuledb>
  ///   edge <a> <b> [loss=F] [delay_ms_min=F] [delay_ms_max=F] [reorder=0|1]
  /// '#' starts a comment.
  static Topology parse(std::istream& in);
  void write(std::ostream& out) const;

 private:
  std::vector<TopoNode> nodes_;
  std::vector<TopoEdge> edges_;
};

struct DefaultTopologySpec {
  std::size_t workers = 5;
  std::size_t coordinators = 1;  // first is active, rest are shadows
  bool capsuledb = false;
  std::size_t durability = 0;
  LinkProfile link;
};

/// One root router, two mid routers, leaves dealt round-robin across the
/// mid routers. Names: w<i>, c<i>, db, d<i>, r0..r2.
Topology default_topology(const DefaultTopologySpec& spec);

class LivelockDetected : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Event-callback contract for anything attached to a leaf.
class Endpoint {
 public:
  virtual ~Endpoint() = default;
  virtual void on_message(NodeId from, const Bytes& msg) = 0;
  virtual void on_timer(std::uint64_t tag) = 0;
};

struct NetStats {
  std::uint64_t sends = 0;       // multicast or unicast originations
  std::uint64_t hops = 0;        // link transmissions attempted
  std::uint64_t hop_drops = 0;
  std::uint64_t deliveries = 0;  // handed to an endpoint
  std::uint64_t dead_drops = 0;  // arrived at a killed node
};

class SimNet {
 public:
  static constexpr std::uint64_t kDefaultEventCap = 100'000'000;

  SimNet(Topology topo, std::uint64_t seed);

  const Topology& topology() const { return topo_; }
  void attach(NodeId node, Endpoint* ep);

  /// Floods to every other leaf. The sender never hears its own message.
  void multicast(NodeId from, Bytes msg);
  /// Routed along the unique tree path; each hop still lossy.
  void unicast(NodeId from, NodeId to, Bytes msg);
  void set_timer(NodeId node, Micros delay, std::uint64_t tag);

  /// Virtual CPU: work charged here delays the node's later events and the
  /// departure of anything it sends.
  void charge(NodeId node, Micros cost);
  Micros busy_until(NodeId node) const { return busy_.at(node); }

  /// Crashed nodes drop deliveries and timers until revived.
  void kill(NodeId node);
  void revive(NodeId node);
  bool alive(NodeId node) const { return alive_.at(node); }

  /// Changes one edge's fault profile mid-run (partitions, healing).
  void set_link(NodeId a, NodeId b, const LinkProfile& p);
  /// Scripted faults: a delivery to a leaf is dropped when this returns true.
  using DropFilter = std::function<bool(NodeId origin, NodeId to, const Bytes& msg)>;
  void set_drop_filter(DropFilter f) { filter_ = std::move(f); }

  Micros now() const { return now_; }
  std::uint64_t run_until(Micros t, std::uint64_t cap = kDefaultEventCap);
  /// Drains the queue; throws LivelockDetected past `cap` events.
  std::uint64_t run_until_quiescent(std::uint64_t cap = kDefaultEventCap);
  bool idle() const { return queue_.empty(); }

  /// JSON-lines trace: {"t":..,"event":..,"node":..,"msg_type":..,"hash":..}.
  /// `describe` extracts (msg_type, hash prefix) from a payload.
  using Describe = std::function<std::pair<std::string, std::string>(const Bytes&)>;
  void set_trace(std::ostream* out, Describe describe = {});

  const NetStats& stats() const { return stats_; }
  /// Hops between two leaves.
  std::size_t distance(NodeId a, NodeId b) const;
  std::mt19937_64& rng() { return rng_; }

 private:
  enum class EvKind : std::uint8_t { kHop, kTimer };
  struct Event {
    Micros t;
    std::uint64_t seq;
    EvKind kind;
    NodeId node;      // receiving node
    NodeId prev;      // previous hop (kHop)
    NodeId origin;
    NodeId dest;      // unicast destination, or kBroadcast
    std::uint64_t tag;
    std::shared_ptr<const Bytes> msg;
  };
  struct Later {
    bool operator()(const Event& a, const Event& b) const { return a.t != b.t ? a.t > b.t : a.seq > b.seq; }
  };
  static constexpr NodeId kBroadcast = 0xffffffffu;

  void send_hop(NodeId from, NodeId to, Micros depart, const Event& proto);
  void push(Event e);
  void dispatch(Event e);
  void trace(const char* event, NodeId node, const Bytes* msg);
  std::size_t edge_index(NodeId a, NodeId b) const;

  Topology topo_;
  std::vector<std::vector<std::pair<NodeId, std::size_t>>> adj_;  // neighbour, edge index
  std::vector<std::vector<NodeId>> next_hop_;                      // [from][to]
  std::vector<Endpoint*> endpoints_;
  std::vector<bool> alive_;
  std::vector<Micros> busy_;
  std::map<std::pair<NodeId, NodeId>, Micros> link_clock_;  // FIFO links
  std::priority_queue<Event, std::vector<Event>, Later> queue_;
  std::uint64_t seq_ = 0;
  Micros now_ = 0;
  std::mt19937_64 rng_;
  NetStats stats_;
  std::ostream* trace_ = nullptr;
  Describe describe_;
  DropFilter filter_;
};

}  // namespace scl::sim
