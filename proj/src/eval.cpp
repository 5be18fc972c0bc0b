#include "ptsr/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>

#include "ptsr/errors.hpp"

namespace ptsr::eval {

RankResult rank_candidates(const model::Scorer& scorer,
                           const model::SequenceContext& ctx,
                           std::span<const int> candidates, int ground_truth,
                           int user) {
  if (std::count(candidates.begin(), candidates.end(), ground_truth) != 1) {
    throw_usage("rank_candidates: candidates must contain the ground truth exactly once");
  }
  RankResult out;
  out.user = user;
  out.ranked.reserve(candidates.size());
  for (int c : candidates) {
    out.ranked.emplace_back(c, scorer.score(ctx, c));
  }
  std::sort(out.ranked.begin(), out.ranked.end(),
            [](const auto& a, const auto& b) {
              if (a.second != b.second) return a.second > b.second;
              return a.first < b.first;
            });
  for (std::size_t i = 0; i < out.ranked.size(); ++i) {
    if (out.ranked[i].first == ground_truth) {
      out.rank = static_cast<int>(i) + 1;
      break;
    }
  }
  return out;
}

std::pair<double, double> metrics(std::span<const RankResult> results, int k) {
  if (k < 1) throw_usage("metrics: K must be >= 1");
  if (results.empty()) throw_usage("metrics: no rank results");
  double hits = 0.0;
  double ndcg = 0.0;
  for (const auto& r : results) {
    if (r.rank >= 1 && r.rank <= k) {
      hits += 1.0;
      ndcg += 1.0 / std::log2(static_cast<double>(r.rank) + 1.0);
    }
  }
  const double n = static_cast<double>(results.size());
  return {hits / n, ndcg / n};
}

Explanation explain(const model::Scorer& scorer,
                    const model::SequenceContext& ctx, int target,
                    ImportanceMode mode) {
  const model::ScoreBreakdown bd = scorer.breakdown(ctx, target);
  Explanation out;
  out.target = target;
  out.score = bd.total;
  out.mode = mode;
  out.levels.resize(bd.levels.size());

  std::unordered_map<int, double> importance;
  for (std::size_t l = 0; l < bd.levels.size(); ++l) {
    for (const auto& ps : bd.levels[l]) {
      if (ps.masked) continue;
      out.levels[l].push_back(ps);
      if (mode == ImportanceMode::PointOnly && ps.level != 1) continue;
      for (int item : ps.items) importance[item] += ps.contribution;
    }
  }
  out.item_importance.assign(importance.begin(), importance.end());
  std::sort(out.item_importance.begin(), out.item_importance.end());
  return out;
}

RecallReport key_item_recall(const model::Scorer& scorer,
                             const data::SplitDataset& ds,
                             std::span<const RelationPair> relations, int k,
                             ImportanceMode mode) {
  if (k < 1) throw_usage("key_item_recall: K must be >= 1");
  if (relations.empty()) throw_usage("key_item_recall: empty relation map");

  std::map<std::string, double> sums;
  std::map<std::string, int> counts;
  RecallReport report;

  for (const auto& pair : relations) {
    if (pair.user < 0 || pair.user >= static_cast<int>(ds.users.size())) {
      ++report.skipped;
      continue;
    }
    const std::vector<int> seq = ds.test_input(pair.user);
    std::set<int> members(seq.begin(), seq.end());
    std::vector<int> related;
    for (int item : pair.related) {
      if (members.count(item) > 0) related.push_back(item);
    }
    if (related.empty()) {
      ++report.skipped;
      continue;
    }

    const auto ctx = scorer.context(seq);
    const Explanation ex = explain(scorer, ctx, pair.target, mode);
    // rank sequence items by importance, descending; ties by ascending id
    std::vector<std::pair<int, double>> ranked = ex.item_importance;
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    std::set<int> related_set(related.begin(), related.end());
    int hit = 0;
    const int top = std::min<int>(k, static_cast<int>(ranked.size()));
    for (int i = 0; i < top; ++i) {
      if (related_set.count(ranked[i].first) > 0) ++hit;
    }
    const double denom = static_cast<double>(
        std::min<int>(k, static_cast<int>(related_set.size())));
    sums[pair.relation] += static_cast<double>(hit) / denom;
    counts[pair.relation] += 1;
  }

  for (const auto& [rel, total] : sums) {
    report.recall[rel] = total / counts[rel];
    report.pairs[rel] = counts[rel];
  }
  return report;
}

EvalSummary evaluate(const model::ModelParams& params,
                     const model::ModelConfig& config,
                     const data::SplitDataset& ds, Split split,
                     std::span<const int> ks) {
  if (ds.users.empty()) throw_usage("evaluate: empty dataset");
  for (int k : ks) {
    if (k < 1) throw_usage("evaluate: K must be >= 1");
  }
  const model::Scorer scorer(params, config);
  std::vector<RankResult> results;
  results.reserve(ds.users.size());
  for (std::size_t u = 0; u < ds.users.size(); ++u) {
    const auto& user = ds.users[u];
    if (user.negatives.empty()) {
      throw_usage("evaluate: dataset has no evaluation candidates (rerun prepare)");
    }
    const int target = split == Split::Valid ? user.valid : user.test;
    std::vector<int> input = split == Split::Valid ? ds.valid_input(static_cast<int>(u))
                                                   : ds.test_input(static_cast<int>(u));
    std::vector<int> candidates = user.negatives;
    candidates.push_back(target);
    const auto ctx = scorer.context(input);
    results.push_back(rank_candidates(scorer, ctx, candidates, target,
                                      static_cast<int>(u)));
  }
  EvalSummary summary;
  summary.users = static_cast<int>(results.size());
  for (int k : ks) {
    const auto [hr, ndcg] = metrics(results, k);
    summary.hr[k] = hr;
    summary.ndcg[k] = ndcg;
  }
  return summary;
}

std::vector<RelationPair> load_relations(const std::string& path,
                                         const data::SplitDataset& ds) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "load_relations: cannot open " + path);

  std::map<std::tuple<int, int, std::string>, std::vector<int>> grouped;
  std::string line;
  std::size_t line_no = 0;
  bool header = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const char delim = line.find('\t') != std::string::npos ? '\t' : ',';
    std::istringstream ss(line);
    std::string user, target, related, relation;
    if (!std::getline(ss, user, delim) || !std::getline(ss, target, delim) ||
        !std::getline(ss, related, delim) || !std::getline(ss, relation, delim)) {
      throw Error(ErrorKind::Io, "load_relations: line " +
                                     std::to_string(line_no) +
                                     ": expected 4 fields");
    }
    if (header && (user == "user" || relation == "relation")) {
      header = false;
      continue;
    }
    header = false;
    const int u = ds.user_index(user);
    const int t = ds.item_id(target);
    const int r = ds.item_id(related);
    if (u < 0 || t == 0 || r == 0) continue;  // filtered out of the dataset
    grouped[{u, t, relation}].push_back(r);
  }

  std::vector<RelationPair> out;
  out.reserve(grouped.size());
  for (auto& [key, items] : grouped) {
    RelationPair p;
    p.user = std::get<0>(key);
    p.target = std::get<1>(key);
    p.relation = std::get<2>(key);
    std::sort(items.begin(), items.end());
    items.erase(std::unique(items.begin(), items.end()), items.end());
    p.related = std::move(items);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace ptsr::eval
