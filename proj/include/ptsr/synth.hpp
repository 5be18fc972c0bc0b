#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ptsr/data.hpp"

namespace ptsr::synth {

struct PlantedRule {
  std::vector<int> antecedent;  // 1..3 distinct item ids, ordered
  int consequent = 0;           // not in the antecedent
  double prob = 1.0;            // firing probability in (0, 1]
};

// Generation per step: if the most recent contiguous window matches an
// antecedent and the rule fires, the consequent is emitted; otherwise the
// step is uniform noise with probability `noise`, else it advances a planted
// antecedent (a fresh uniformly chosen rule when none is in progress).
struct SynthConfig {
  int vocab = 200;
  int users = 2000;
  int len_min = 15;
  int len_max = 20;
  std::vector<PlantedRule> rules;
  double noise = 0.2;
  std::uint64_t seed = 7;

  void validate() const;

  static std::vector<PlantedRule> random_rules(int one_item, int two_item,
                                               double prob, int vocab,
                                               std::uint64_t seed);
  // The acceptance reference: V=200, 2000 users, lengths 15-20,
  // 20 two-item rules + 10 one-item rules at 0.9, noise 0.2, seed 7.
  static SynthConfig reference();
};

struct KeyPattern {
  int user = 0;        // user index, 0-based
  int target_pos = 0;  // 0-based position of the fired consequent
  std::vector<int> antecedent_pos;
};

struct SynthOutput {
  data::InteractionLog log;
  std::vector<KeyPattern> key_map;
};

SynthOutput generate(const SynthConfig& config);

std::string user_name(int index, int total);
std::string item_name(int id, int vocab);

// Same delimited text the data module ingests (tsv with header).
void write_log(const data::InteractionLog& log, const std::string& path);
// One line per fired rule: user, target position, antecedent positions.
void write_key_map(const std::vector<KeyPattern>& map, const SynthConfig& cfg,
                   const std::string& path);
std::vector<KeyPattern> read_key_map(const std::string& path);

}  // namespace ptsr::synth
