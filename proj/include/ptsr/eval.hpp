#pragma once

#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ptsr/data.hpp"
#include "ptsr/model.hpp"

namespace ptsr::eval {

struct RankResult {
  int user = -1;
  std::vector<std::pair<int, double>> ranked;  // (candidate id, score), descending
  int rank = 0;                                // 1-based rank of the ground truth
};

// Scores every candidate with the same model state; descending sort with
// ties broken by ascending candidate id. `candidates` must contain the
// ground truth exactly once.
RankResult rank_candidates(const model::Scorer& scorer,
                           const model::SequenceContext& ctx,
                           std::span<const int> candidates, int ground_truth,
                           int user = -1);

// HR@K and NDCG@K averaged over users.
std::pair<double, double> metrics(std::span<const RankResult> results, int k);

enum class ImportanceMode { Aggregated, PointOnly };

struct Explanation {
  int target = 0;
  double score = 0.0;
  // unmasked pattern records per level
  std::vector<std::vector<model::PatternScore>> levels;
  // item id -> summed contribution of the patterns containing it
  std::vector<std::pair<int, double>> item_importance;
  ImportanceMode mode = ImportanceMode::Aggregated;
};

Explanation explain(const model::Scorer& scorer,
                    const model::SequenceContext& ctx, int target,
                    ImportanceMode mode = ImportanceMode::Aggregated);

struct RelationPair {
  int user = -1;
  int target = 0;
  std::string relation;
  std::vector<int> related;  // item ids expected inside the evaluated sequence
};

struct RecallReport {
  std::map<std::string, double> recall;  // per relation type
  std::map<std::string, int> pairs;      // pairs contributing per type
  int skipped = 0;                       // pairs with no related sequence item
};

// Ranks the items of each user's test sequence by importance and reports
// |top-K  intersect  related| / min(K, |related|) per relation type.
RecallReport key_item_recall(const model::Scorer& scorer,
                             const data::SplitDataset& ds,
                             std::span<const RelationPair> relations, int k,
                             ImportanceMode mode = ImportanceMode::Aggregated);

enum class Split { Valid, Test };

struct EvalSummary {
  int users = 0;
  std::map<int, double> hr;    // per K
  std::map<int, double> ndcg;  // per K
};

// Real-plus-N protocol: each user's stored negatives plus the split target.
EvalSummary evaluate(const model::ModelParams& params,
                     const model::ModelConfig& config,
                     const data::SplitDataset& ds, Split split,
                     std::span<const int> ks);

// Delimited text: user, target item, related item, relation type.
// Lines naming unknown users or items are ignored.
std::vector<RelationPair> load_relations(const std::string& path,
                                         const data::SplitDataset& ds);

}  // namespace ptsr::eval
