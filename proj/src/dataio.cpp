#include "sesshet/dataio.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace sesshet {

namespace fs = std::filesystem;

int Vocab::add(const std::string& id) {
  auto [it, inserted] = index_of.try_emplace(id, int(id_of.size()));
  if (inserted) id_of.push_back(id);
  return it->second;
}

int Vocab::lookup(const std::string& id) const {
  auto it = index_of.find(id);
  return it == index_of.end() ? -1 : it->second;
}

uint64_t Dataset::vocab_hash() const {
  uint64_t h = kFnvOffset;
  for (const Vocab* v : {&items, &users, &sessions}) {
    for (const std::string& id : v->id_of) {
      h = fnv1a64(id, h);
      h = fnv1a64("\n", h);
    }
    h = fnv1a64("\x1e", h);  // vocab separator
  }
  return h;
}

bool is_anonymous_user(const std::string& id) {
  if (id.empty() || id == "-" || id == "0") return true;
  std::string low(id);
  std::transform(low.begin(), low.end(), low.begin(),
                 [](unsigned char c) { return char(std::tolower(c)); });
  return low == "na" || low == "n/a" || low == "nan" || low == "null" ||
         low == "none" || low == "anonymous";
}

namespace {

std::vector<std::string> split_row(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == delim) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

bool parse_timestamp(const std::string& s, int64_t& out) {
  if (s.empty()) return false;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size() && out >= 0;
}

bool looks_like_header(const std::vector<std::string>& fields) {
  static const char* names[] = {"user", "user_id",    "userid",  "item",
                                "item_id", "itemid",  "session", "session_id",
                                "sessionid", "time",  "timestamp", "ts",
                                "eventdate", "date"};
  for (const std::string& f : fields) {
    std::string low(f);
    std::transform(low.begin(), low.end(), low.begin(),
                   [](unsigned char c) { return char(std::tolower(c)); });
    for (const char* n : names)
      if (low == n) return true;
  }
  return false;
}

}  // namespace

std::vector<Interaction> parse_log(const std::string& path, char delimiter) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open input: " + path);

  std::vector<Interaction> rows;
  std::vector<std::string> problems;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields = split_row(line, delimiter);
    int64_t ts = 0;
    if (lineno == 1 && fields.size() == 4 && !parse_timestamp(fields[3], ts) &&
        looks_like_header(fields))
      continue;
    if (fields.size() != 4) {
      problems.push_back("line " + std::to_string(lineno) + ": expected 4 fields, got " +
                         std::to_string(fields.size()));
      continue;
    }
    if (fields[0].empty() || fields[1].empty() || fields[2].empty()) {
      problems.push_back("line " + std::to_string(lineno) + ": empty field");
      continue;
    }
    if (!parse_timestamp(fields[3], ts)) {
      problems.push_back("line " + std::to_string(lineno) + ": bad timestamp '" +
                         fields[3] + "'");
      continue;
    }
    rows.push_back({fields[0], fields[1], fields[2], ts});
  }
  if (!problems.empty()) {
    std::string msg = "malformed input in " + path + ":";
    size_t shown = std::min<size_t>(problems.size(), 8);
    for (size_t i = 0; i < shown; ++i) msg += "\n  " + problems[i];
    if (problems.size() > shown)
      msg += "\n  (+" + std::to_string(problems.size() - shown) + " more)";
    throw ParseError(msg);
  }
  return rows;
}

Dataset preprocess(const std::vector<Interaction>& raw, const PreprocessConfig& cfg) {
  if (raw.empty()) throw DataError("preprocess: no interactions");
  if (cfg.min_item_freq < 1 || cfg.min_user_ops < 1 || cfg.min_session_len < 1 ||
      cfg.test_window_days < 1)
    throw DataError("preprocess: config counts must be >= 1");

  // 1) anonymous users out
  std::vector<size_t> live;
  live.reserve(raw.size());
  for (size_t i = 0; i < raw.size(); ++i)
    if (!is_anonymous_user(raw[i].user)) live.push_back(i);

  // 2) inactive users out (when enabled)
  if (cfg.min_user_ops > 1) {
    std::unordered_map<std::string, int> ops;
    for (size_t i : live) ++ops[raw[i].user];
    std::vector<size_t> kept;
    kept.reserve(live.size());
    for (size_t i : live)
      if (ops[raw[i].user] >= cfg.min_user_ops) kept.push_back(i);
    live.swap(kept);
  }

  // 3) rare items out
  {
    std::unordered_map<std::string, int> freq;
    for (size_t i : live) ++freq[raw[i].item];
    std::vector<size_t> kept;
    kept.reserve(live.size());
    for (size_t i : live)
      if (freq[raw[i].item] >= cfg.min_item_freq) kept.push_back(i);
    live.swap(kept);
  }

  // 4) assemble sessions; short ones out
  struct RawSession {
    std::string id;
    std::string user;
    int64_t start = 0, end = 0;
    size_t first_row = 0;
    std::vector<size_t> rows;
  };
  std::unordered_map<std::string, size_t> by_id;
  std::vector<RawSession> sessions;
  for (size_t i : live) {
    auto [it, inserted] = by_id.try_emplace(raw[i].session, sessions.size());
    if (inserted) {
      RawSession s;
      s.id = raw[i].session;
      s.first_row = i;
      sessions.push_back(std::move(s));
    }
    sessions[it->second].rows.push_back(i);
  }
  for (RawSession& s : sessions) {
    // items ordered by timestamp; ties keep input order
    std::stable_sort(s.rows.begin(), s.rows.end(), [&](size_t a, size_t b) {
      return raw[a].timestamp < raw[b].timestamp;
    });
    s.start = raw[s.rows.front()].timestamp;
    s.end = raw[s.rows.back()].timestamp;
    s.user = raw[s.rows.front()].user;  // a session belongs to its first user
  }
  std::erase_if(sessions, [&](const RawSession& s) {
    return int(s.rows.size()) < cfg.min_session_len;
  });
  if (sessions.empty()) throw DataError("preprocess: no sessions survive filtering");

  std::sort(sessions.begin(), sessions.end(), [](const RawSession& a, const RawSession& b) {
    if (a.start != b.start) return a.start < b.start;
    return a.first_row < b.first_row;
  });

  // 5) time split on session end
  int64_t max_ts = 0;
  for (const RawSession& s : sessions) max_ts = std::max(max_ts, s.end);
  int64_t cutoff = max_ts - int64_t(cfg.test_window_days) * 86400;

  Dataset ds;
  std::vector<const RawSession*> test_raw;
  for (const RawSession& s : sessions) {
    if (s.end > cutoff) {
      test_raw.push_back(&s);
      continue;
    }
    Session out;
    out.user = ds.users.add(s.user);
    for (size_t i : s.rows) out.items.push_back(ds.items.add(raw[i].item));
    ds.sessions.add(s.id);
    ds.train.push_back(std::move(out));
  }
  if (ds.train.empty()) throw DataError("preprocess: empty train split");

  // 6) train-closure on the test side
  for (const RawSession* s : test_raw) {
    int user = ds.users.lookup(s->user);
    if (user < 0) continue;
    Session out;
    out.user = user;
    bool ok = true;
    for (size_t i : s->rows) {
      int item = ds.items.lookup(raw[i].item);
      if (item < 0) {
        ok = false;
        break;
      }
      out.items.push_back(item);
    }
    if (ok) ds.test.push_back(std::move(out));
  }
  if (ds.test.empty()) throw DataError("preprocess: empty test split");
  return ds;
}

// ---------------------------------------------------------------------------
// Dataset directory layout: three vocab files (one external id per line) and
// two session files (`user_idx<TAB>item_idx,item_idx,...`).

namespace {

void write_vocab(const fs::path& path, const Vocab& v) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const std::string& id : v.id_of) out << id << '\n';
}

Vocab read_vocab(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  Vocab v;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    v.add(line);
  }
  return v;
}

void write_sessions(const fs::path& path, const std::vector<Session>& sessions) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const Session& s : sessions) {
    out << s.user << '\t';
    for (size_t i = 0; i < s.items.size(); ++i) {
      if (i) out << ',';
      out << s.items[i];
    }
    out << '\n';
  }
}

std::vector<Session> read_sessions(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<Session> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    Session s;
    std::string items;
    if (!(ss >> s.user >> items))
      throw ParseError(path.string() + ": bad session at line " + std::to_string(lineno));
    for (const std::string& tok : split_row(items, ','))
      s.items.push_back(std::stoi(tok));
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& dir) {
  fs::create_directories(dir);
  write_vocab(fs::path(dir) / "items.vocab", ds.items);
  write_vocab(fs::path(dir) / "users.vocab", ds.users);
  write_vocab(fs::path(dir) / "sessions.vocab", ds.sessions);
  write_sessions(fs::path(dir) / "train.sessions", ds.train);
  write_sessions(fs::path(dir) / "test.sessions", ds.test);
}

Dataset load_dataset(const std::string& dir) {
  Dataset ds;
  ds.items = read_vocab(fs::path(dir) / "items.vocab");
  ds.users = read_vocab(fs::path(dir) / "users.vocab");
  ds.sessions = read_vocab(fs::path(dir) / "sessions.vocab");
  ds.train = read_sessions(fs::path(dir) / "train.sessions");
  ds.test = read_sessions(fs::path(dir) / "test.sessions");
  for (const Session& s : ds.train)
    for (int it : s.items)
      if (it < 0 || size_t(it) >= ds.items.size())
        throw DataError("dataset: item index out of range in " + dir);
  return ds;
}

// ---------------------------------------------------------------------------

BatchIter::BatchIter(const Dataset& ds, int batch_size, uint64_t seed, InstanceMode mode)
    : ds_(ds), batch_size_(batch_size) {
  if (batch_size < 1) throw DataError("batch_iter: batch_size must be >= 1");
  std::vector<int> order(ds.train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
  Rng rng(seed);
  // Fisher-Yates over sessions
  for (size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[rng.next_index(i)]);
  for (int si : order) {
    const Session& s = ds.train[size_t(si)];
    if (s.items.size() < 2) continue;
    if (mode == InstanceMode::LastOnly) {
      instances_.emplace_back(si, int(s.items.size()) - 1);
    } else {
      for (size_t plen = 1; plen < s.items.size(); ++plen)
        instances_.emplace_back(si, int(plen));
    }
  }
}

std::optional<SessionBatch> BatchIter::next() {
  if (cursor_ >= instances_.size()) return std::nullopt;
  size_t end = std::min(instances_.size(), cursor_ + size_t(batch_size_));
  SessionBatch batch;
  size_t max_len = 0;
  for (size_t i = cursor_; i < end; ++i)
    max_len = std::max(max_len, size_t(instances_[i].second));
  for (size_t i = cursor_; i < end; ++i) {
    auto [si, plen] = instances_[i];
    const Session& s = ds_.train[size_t(si)];
    std::vector<int> prefix(max_len, 0);
    std::copy(s.items.begin(), s.items.begin() + plen, prefix.begin());
    batch.prefixes.push_back(std::move(prefix));
    batch.lengths.push_back(plen);
    batch.targets.push_back(s.items[size_t(plen)]);
  }
  cursor_ = end;
  return batch;
}

}  // namespace sesshet
