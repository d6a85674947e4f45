#pragma once

// Interaction-log ingestion: parsing, the preprocessing filter cascade,
// train/test splitting, vocabularies, and the mini-batch stream.

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "sesshet/common.hpp"

namespace sesshet {

struct Interaction {
  std::string user, item, session;
  int64_t timestamp = 0;
};

struct PreprocessConfig {
  int min_item_freq = 5;
  int min_user_ops = 1;   // 1 disables the user-activity filter
  int min_session_len = 2;
  int test_window_days = 7;

  static PreprocessConfig diginetica() { return {5, 1, 2, 7}; }
  static PreprocessConfig tmall() { return {10, 20, 2, 15}; }
};

// Dense-index bijection over external string ids.
struct Vocab {
  std::vector<std::string> id_of;
  std::unordered_map<std::string, int> index_of;

  int add(const std::string& id);
  // -1 when unknown.
  int lookup(const std::string& id) const;
  size_t size() const { return id_of.size(); }
};

struct Session {
  int user = -1;
  std::vector<int> items;
};

struct Dataset {
  std::vector<Session> train, test;
  Vocab items, users, sessions;  // sessions covers train only; index == position

  // Fingerprint of the three vocabularies; embedded in downstream artifacts
  // so mismatched pipeline stages fail fast.
  uint64_t vocab_hash() const;
};

// True for ids treated as anonymous ("NA", "null", "-", "0", ...).
bool is_anonymous_user(const std::string& id);

// Parses a delimited log with columns user,item,session,timestamp. A header
// row is skipped when its timestamp field is non-numeric and a field names a
// known column. Malformed rows abort with a ParseError listing line numbers.
std::vector<Interaction> parse_log(const std::string& path, char delimiter = ',');

// The filter cascade, applied once in a fixed order: anonymous users, then
// inactive users, then rare items, then short sessions; finally the split by
// session end time and the train-closure filter on the test side.
Dataset preprocess(const std::vector<Interaction>& raw, const PreprocessConfig& cfg);

void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

struct SessionBatch {
  std::vector<std::vector<int>> prefixes;  // padded with 0 up to the batch max length
  std::vector<int> lengths;                // true prefix lengths
  std::vector<int> targets;
};

enum class InstanceMode {
  AllPrefixes,  // session [a,b,c] -> ([a],b), ([a,b],c)
  LastOnly,     // session [a,b,c] -> ([a,b],c)
};

// Seed-deterministic mini-batch stream over the train split. Sessions are
// shuffled once up front, then expanded to (prefix, target) instances.
class BatchIter {
 public:
  BatchIter(const Dataset& ds, int batch_size, uint64_t seed,
            InstanceMode mode = InstanceMode::AllPrefixes);
  std::optional<SessionBatch> next();
  size_t num_instances() const { return instances_.size(); }

 private:
  const Dataset& ds_;
  int batch_size_;
  std::vector<std::pair<int, int>> instances_;  // (session idx, prefix length)
  size_t cursor_ = 0;
};

}  // namespace sesshet
