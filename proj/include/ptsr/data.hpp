#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace ptsr::data {

struct Interaction {
  std::string user;
  std::string item;
  std::int64_t ts = 0;
};

// Deduplicated, per-user chronologically sorted interactions. Users appear
// in lexicographic order; ties in timestamp keep input order.
struct InteractionLog {
  std::vector<Interaction> records;
};

struct TextFormat {
  char delimiter = '\t';
  bool header = true;
  bool headerless_uirt = false;  // user,item,rating,timestamp without header
  std::string user_col = "user";
  std::string item_col = "item";
  std::string time_col = "timestamp";

  // "tsv" | "csv" | "amazon" (headerless user,item,rating,timestamp CSV)
  static TextFormat named(const std::string& name);
};

InteractionLog ingest(const std::string& path, const TextFormat& fmt);

// Iterates user-filter and item-filter to the fixpoint where every
// surviving user and item has at least 5 interactions.
InteractionLog five_core_filter(const InteractionLog& log);

struct UserSplit {
  std::string name;
  std::vector<int> history;  // full chronological dense ids
  std::vector<int> train;    // most recent <= max_len, excluding valid/test
  int valid = 0;             // second-to-last interaction
  int test = 0;              // last interaction
  std::vector<int> negatives;  // sampled evaluation candidates
};

struct SplitDataset {
  int format_version = 1;
  int max_len = 20;
  int negatives_per_user = 0;
  std::uint64_t candidate_seed = 0;
  std::vector<std::string> items;  // dense id -> name; id 0 is padding
  std::vector<UserSplit> users;
  std::string run_config;       // preparation options, persisted verbatim
  std::uint64_t file_hash = 0;  // hash of the serialized bundle, set on load

  int vocab() const { return static_cast<int>(items.size()); }
  const std::string& item_name(int id) const;
  int item_id(const std::string& name) const;     // 0 when unknown
  int user_index(const std::string& name) const;  // -1 when unknown

  std::vector<int> valid_input(int u) const;  // the train sequence
  std::vector<int> test_input(int u) const;   // train + valid, most recent max_len
};

SplitDataset split(const InteractionLog& log, int max_len);

// Samples `count` uniform negatives per user, disjoint from the user's full
// history; reproducible under `seed`.
void build_eval_candidates(SplitDataset& ds, int count, std::uint64_t seed);

std::string serialize_bundle(const SplitDataset& ds);
void save_bundle(const SplitDataset& ds, const std::string& path);
SplitDataset load_bundle(const std::string& path);

std::uint64_t fnv1a(std::span<const char> bytes);

struct Batch {
  int rows = 0;
  int cols = 0;                    // max_len
  std::vector<int> user_index;     // dataset row per example
  std::vector<int> ids;            // row-major rows x cols, left-padded with 0
  std::vector<std::uint8_t> mask;  // 1 = real item
  std::vector<int> positives;
  std::vector<int> negatives;

  std::span<const int> row(int r) const {
    return {ids.data() + static_cast<std::size_t>(r) * cols,
            static_cast<std::size_t>(cols)};
  }
};

// Per-epoch training batches: user order reshuffled, one training pair per
// user (a seeded prefix position of the train sequence plus a fresh uniform
// negative outside the user's history). Users whose train sequence is too
// short to form a pair are skipped.
class BatchStream {
 public:
  BatchStream(const SplitDataset& ds, int batch_size, std::uint64_t seed);
  std::vector<Batch> epoch(int epoch_index) const;
  int examples_per_epoch() const { return static_cast<int>(eligible_.size()); }

 private:
  const SplitDataset* ds_;
  int batch_size_;
  std::uint64_t seed_;
  std::vector<int> eligible_;
};

}  // namespace ptsr::data
