#include "sesshet/hetgraph.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

namespace sesshet {

const char* kind_name(NodeKind k) {
  switch (k) {
    case NodeKind::Item: return "item";
    case NodeKind::Session: return "session";
    case NodeKind::User: return "user";
  }
  return "?";
}

size_t HetGraph::count(NodeKind k) const {
  switch (k) {
    case NodeKind::Item: return num_items;
    case NodeKind::Session: return num_sessions;
    case NodeKind::User: return num_users;
  }
  return 0;
}

size_t HetGraph::unified_id(NodeRef n) const {
  switch (n.kind) {
    case NodeKind::Item: return size_t(n.index);
    case NodeKind::Session: return num_items + size_t(n.index);
    case NodeKind::User: return num_items + num_sessions + size_t(n.index);
  }
  return 0;
}

NodeRef HetGraph::from_unified(size_t id) const {
  if (id < num_items) return {NodeKind::Item, int(id)};
  if (id < num_items + num_sessions) return {NodeKind::Session, int(id - num_items)};
  return {NodeKind::User, int(id - num_items - num_sessions)};
}

void HetGraph::rebuild_adjacency() {
  adj_.assign(total_nodes(), {});
  auto link = [&](NodeRef a, NodeRef b) {
    adj_[unified_id(a)].push_back(b);
    adj_[unified_id(b)].push_back(a);
  };
  for (size_t i = 0; i < num_items && i < item_next.size(); ++i)
    for (auto [dst, cnt] : item_next[i]) {
      (void)cnt;
      link({NodeKind::Item, int(i)}, {NodeKind::Item, dst});
    }
  for (size_t i = 0; i < num_items && i < item_sessions.size(); ++i)
    for (int s : item_sessions[i]) link({NodeKind::Item, int(i)}, {NodeKind::Session, s});
  for (size_t i = 0; i < num_items && i < item_users.size(); ++i)
    for (int u : item_users[i]) link({NodeKind::Item, int(i)}, {NodeKind::User, u});
  for (size_t s = 0; s < num_sessions && s < session_users.size(); ++s)
    for (int u : session_users[s]) link({NodeKind::Session, int(s)}, {NodeKind::User, u});
  for (auto& nb : adj_) {
    std::sort(nb.begin(), nb.end());
    nb.erase(std::unique(nb.begin(), nb.end()), nb.end());
  }
}

std::span<const NodeRef> HetGraph::neighbors(NodeRef n) const {
  size_t id = unified_id(n);
  if (id >= adj_.size()) throw DataError("neighbors: node out of range");
  return adj_[id];
}

HetGraph build_graph(const Dataset& ds, bool include_session_nodes) {
  HetGraph g;
  g.num_items = ds.items.size();
  g.num_users = ds.users.size();
  g.num_sessions = include_session_nodes ? ds.train.size() : 0;

  std::vector<std::map<int, int>> next_counts(g.num_items);
  g.item_sessions.assign(g.num_items, {});
  g.item_users.assign(g.num_items, {});
  g.session_items.assign(g.num_sessions, {});
  g.session_users.assign(g.num_sessions, {});
  g.user_items.assign(g.num_users, {});
  g.user_sessions.assign(g.num_users, {});

  for (size_t si = 0; si < ds.train.size(); ++si) {
    const Session& s = ds.train[si];
    for (size_t i = 0; i + 1 < s.items.size(); ++i)
      ++next_counts[size_t(s.items[i])][s.items[i + 1]];
    for (int item : s.items) {
      g.item_users[size_t(item)].push_back(s.user);
      g.user_items[size_t(s.user)].push_back(item);
      if (include_session_nodes) {
        g.item_sessions[size_t(item)].push_back(int(si));
        g.session_items[si].push_back(item);
      }
    }
    if (include_session_nodes) {
      g.session_users[si].push_back(s.user);
      g.user_sessions[size_t(s.user)].push_back(int(si));
    }
  }

  g.item_next.resize(g.num_items);
  for (size_t i = 0; i < g.num_items; ++i)
    g.item_next[i].assign(next_counts[i].begin(), next_counts[i].end());

  auto dedupe = [](std::vector<std::vector<int>>& lists) {
    for (auto& l : lists) {
      std::sort(l.begin(), l.end());
      l.erase(std::unique(l.begin(), l.end()), l.end());
    }
  };
  dedupe(g.item_sessions);
  dedupe(g.item_users);
  dedupe(g.session_items);
  dedupe(g.session_users);
  dedupe(g.user_items);
  dedupe(g.user_sessions);

  g.rebuild_adjacency();
  return g;
}

// ---------------------------------------------------------------------------
// Text persistence. Header carries node counts and the originating dataset's
// vocabulary hash; `t` lines are directed transitions with multiplicities and
// `e` lines are undirected membership edges.

void save_graph(const HetGraph& g, const std::string& path, uint64_t vocab_hash) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "# sesshet-graph items=" << g.num_items << " sessions=" << g.num_sessions
      << " users=" << g.num_users << " vocab=" << std::hex << vocab_hash << std::dec
      << '\n';
  for (size_t i = 0; i < g.num_items; ++i)
    for (auto [dst, cnt] : g.item_next[i])
      out << "t i:" << i << " i:" << dst << ' ' << cnt << '\n';
  for (size_t i = 0; i < g.num_items; ++i) {
    for (int s : g.item_sessions[i]) out << "e i:" << i << " s:" << s << " 1\n";
    for (int u : g.item_users[i]) out << "e i:" << i << " u:" << u << " 1\n";
  }
  for (size_t s = 0; s < g.num_sessions; ++s)
    for (int u : g.session_users[s]) out << "e s:" << s << " u:" << u << " 1\n";
  if (!out) throw IoError("write failed: " + path);
}

namespace {

NodeRef parse_node(const std::string& tok) {
  if (tok.size() < 3 || tok[1] != ':') throw ParseError("graph: bad node token " + tok);
  NodeKind kind;
  switch (tok[0]) {
    case 'i': kind = NodeKind::Item; break;
    case 's': kind = NodeKind::Session; break;
    case 'u': kind = NodeKind::User; break;
    default: throw ParseError("graph: bad node kind in " + tok);
  }
  int idx = 0;
  auto [p, ec] = std::from_chars(tok.data() + 2, tok.data() + tok.size(), idx);
  if (ec != std::errc() || p != tok.data() + tok.size())
    throw ParseError("graph: bad node index in " + tok);
  return {kind, idx};
}

}  // namespace

HetGraph load_graph(const std::string& path, uint64_t* vocab_hash_out) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string header;
  if (!std::getline(in, header) || header.rfind("# sesshet-graph", 0) != 0)
    throw ParseError("graph: missing header in " + path);
  HetGraph g;
  uint64_t vocab = 0;
  {
    std::istringstream hs(header);
    std::string tok;
    while (hs >> tok) {
      if (tok.rfind("items=", 0) == 0) g.num_items = std::stoul(tok.substr(6));
      if (tok.rfind("sessions=", 0) == 0) g.num_sessions = std::stoul(tok.substr(9));
      if (tok.rfind("users=", 0) == 0) g.num_users = std::stoul(tok.substr(6));
      if (tok.rfind("vocab=", 0) == 0) vocab = std::stoull(tok.substr(6), nullptr, 16);
    }
  }
  if (vocab_hash_out) *vocab_hash_out = vocab;
  g.item_next.assign(g.num_items, {});
  g.item_sessions.assign(g.num_items, {});
  g.item_users.assign(g.num_items, {});
  g.session_items.assign(g.num_sessions, {});
  g.session_users.assign(g.num_sessions, {});
  g.user_items.assign(g.num_users, {});
  g.user_sessions.assign(g.num_users, {});

  std::string line;
  size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string tag, a, b;
    int cnt = 0;
    if (!(ls >> tag >> a >> b >> cnt))
      throw ParseError(path + ": bad edge at line " + std::to_string(lineno));
    NodeRef na = parse_node(a), nb = parse_node(b);
    if (tag == "t") {
      g.item_next[size_t(na.index)].emplace_back(nb.index, cnt);
    } else if (tag == "e") {
      if (na.kind == NodeKind::Item && nb.kind == NodeKind::Session) {
        g.item_sessions[size_t(na.index)].push_back(nb.index);
        g.session_items[size_t(nb.index)].push_back(na.index);
      } else if (na.kind == NodeKind::Item && nb.kind == NodeKind::User) {
        g.item_users[size_t(na.index)].push_back(nb.index);
        g.user_items[size_t(nb.index)].push_back(na.index);
      } else if (na.kind == NodeKind::Session && nb.kind == NodeKind::User) {
        g.session_users[size_t(na.index)].push_back(nb.index);
        g.user_sessions[size_t(nb.index)].push_back(na.index);
      } else {
        throw ParseError(path + ": unsupported edge kinds at line " +
                         std::to_string(lineno));
      }
    } else {
      throw ParseError(path + ": unknown edge tag at line " + std::to_string(lineno));
    }
  }
  g.rebuild_adjacency();
  return g;
}

// ---------------------------------------------------------------------------

int WalkConfig::cap(NodeKind k) const {
  switch (k) {
    case NodeKind::Item: return k_item;
    case NodeKind::Session: return k_session;
    case NodeKind::User: return k_user;
  }
  return 0;
}

bool NeighborSet::empty() const {
  for (const auto& l : by_kind)
    if (!l.empty()) return false;
  return true;
}

NeighborSet rwr_sample(const HetGraph& g, NodeRef start, const WalkConfig& cfg) {
  if (start.kind != NodeKind::Item)
    throw DataError("rwr_sample: walks start from item nodes");
  if (size_t(start.index) >= g.num_items)
    throw DataError("rwr_sample: start item out of range");
  if (cfg.restart_prob < 0.0 || cfg.restart_prob > 1.0)
    throw DataError("rwr_sample: restart_prob must lie in [0,1]");
  if (g.degree(start) == 0)
    throw DataError("rwr_sample: start node is isolated");

  // Reachable nodes per kind bound the per-kind quotas; found by flood fill
  // over the walker view.
  std::array<size_t, 3> reachable = {0, 0, 0};
  {
    std::vector<char> seen(g.total_nodes(), 0);
    std::vector<size_t> stack = {g.unified_id(start)};
    seen[stack[0]] = 1;
    while (!stack.empty()) {
      size_t cur = stack.back();
      stack.pop_back();
      for (NodeRef nb : g.neighbors(g.from_unified(cur))) {
        size_t id = g.unified_id(nb);
        if (!seen[id]) {
          seen[id] = 1;
          ++reachable[size_t(nb.kind)];
          stack.push_back(id);
        }
      }
    }
  }
  std::array<size_t, 3> quota;
  for (NodeKind k : kAllKinds)
    quota[size_t(k)] = std::min(size_t(std::max(cfg.cap(k), 0)), reachable[size_t(k)]);

  Rng rng(cfg.seed);
  std::vector<int> visits(g.total_nodes(), 0);
  std::array<size_t, 3> distinct = {0, 0, 0};
  long recorded = 0;
  const long list_len = cfg.rwr_list_len;
  const long step_cap = 10L * cfg.rwr_list_len;

  NodeRef cur = start;
  auto quotas_met = [&] {
    for (NodeKind k : kAllKinds)
      if (distinct[size_t(k)] < quota[size_t(k)]) return false;
    return true;
  };
  for (long step = 0; step < step_cap; ++step) {
    if (recorded >= list_len && quotas_met()) break;
    if (rng.next_double() < cfg.restart_prob) {
      cur = start;
    } else {
      auto nbs = g.neighbors(cur);
      cur = nbs[rng.next_index(nbs.size())];
    }
    if (cur == start) continue;
    size_t id = g.unified_id(cur);
    if (visits[id]++ == 0) ++distinct[size_t(cur.kind)];
    ++recorded;
  }

  NeighborSet out;
  for (size_t id = 0; id < visits.size(); ++id) {
    if (visits[id] == 0) continue;
    NodeRef n = g.from_unified(id);
    out.by_kind[size_t(n.kind)].emplace_back(n, visits[id]);
  }
  for (NodeKind k : kAllKinds) {
    auto& list = out.by_kind[size_t(k)];
    std::sort(list.begin(), list.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first.index < b.first.index;
    });
    size_t cap = size_t(std::max(cfg.cap(k), 0));
    if (list.size() > cap) list.resize(cap);
  }
  return out;
}

}  // namespace sesshet
