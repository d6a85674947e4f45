#pragma once

// The typed session graph: directed item->item transition edges with
// multiplicities plus undirected membership edges between items, sessions,
// and users; and restart-walk neighbor sampling over it.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sesshet/common.hpp"
#include "sesshet/dataio.hpp"

namespace sesshet {

enum class NodeKind : uint8_t { Item = 0, Session = 1, User = 2 };
inline constexpr std::array<NodeKind, 3> kAllKinds = {NodeKind::Item, NodeKind::Session,
                                                      NodeKind::User};
const char* kind_name(NodeKind k);

struct NodeRef {
  NodeKind kind = NodeKind::Item;
  int index = 0;
  friend bool operator==(const NodeRef&, const NodeRef&) = default;
  friend auto operator<=>(const NodeRef&, const NodeRef&) = default;
};

struct HetGraph {
  size_t num_items = 0, num_sessions = 0, num_users = 0;

  // Directed transition edges (dst, multiplicity), sorted by dst.
  std::vector<std::vector<std::pair<int, int>>> item_next;
  // Undirected membership edges, deduplicated and sorted.
  std::vector<std::vector<int>> item_sessions, item_users;
  std::vector<std::vector<int>> session_items, session_users;
  std::vector<std::vector<int>> user_items, user_sessions;

  size_t count(NodeKind k) const;
  size_t total_nodes() const { return num_items + num_sessions + num_users; }

  // Walker view: every edge traversable in both directions, unique neighbors.
  // Must be called after mutating the edge lists by hand.
  void rebuild_adjacency();
  std::span<const NodeRef> neighbors(NodeRef n) const;
  size_t degree(NodeRef n) const { return neighbors(n).size(); }

  size_t unified_id(NodeRef n) const;
  NodeRef from_unified(size_t id) const;

 private:
  std::vector<std::vector<NodeRef>> adj_;
};

// Session nodes can be excluded to measure their contribution; the graph then
// contains only item and user nodes.
HetGraph build_graph(const Dataset& ds, bool include_session_nodes = true);

void save_graph(const HetGraph& g, const std::string& path, uint64_t vocab_hash);
HetGraph load_graph(const std::string& path, uint64_t* vocab_hash_out = nullptr);

struct WalkConfig {
  double restart_prob = 0.5;
  int rwr_list_len = 100;
  int k_item = 10;
  int k_session = 1;
  int k_user = 15;
  uint64_t seed = 1;

  int cap(NodeKind k) const;
  static WalkConfig diginetica() { return {0.5, 100, 10, 1, 15, 1}; }
  static WalkConfig tmall() { return {0.5, 100, 1, 15, 1, 1}; }
};

// Per kind: sampled neighbors with their visit counts, ordered by descending
// count then ascending index.
struct NeighborSet {
  std::array<std::vector<std::pair<NodeRef, int>>, 3> by_kind;

  std::span<const std::pair<NodeRef, int>> of(NodeKind k) const {
    return by_kind[size_t(k)];
  }
  bool empty() const;
};

// Walks from `start`, returning to it with probability restart_prob at each
// step and otherwise moving to a uniformly random adjacent node. Visits are
// recorded (start excluded) until the list is full and every kind with
// reachable nodes met its cap, or until 10x rwr_list_len steps have run.
NeighborSet rwr_sample(const HetGraph& g, NodeRef start, const WalkConfig& cfg);

}  // namespace sesshet
