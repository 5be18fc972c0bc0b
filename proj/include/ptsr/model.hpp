#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ptsr/diff.hpp"

namespace ptsr::model {

enum class Family { Gamma, Beta };

std::string family_name(Family f);
Family family_from_name(const std::string& name);

struct Ablations {
  bool use_weight = true;          // distance-based weights (off: every eta = 1)
  bool use_bias = true;            // sequence-aware bias term
  bool use_kl = true;              // off: negated cosine similarity of mean vectors
  bool use_prob_embedding = true;  // off: plain embeddings, weighted sum, cosine
};

struct ModelConfig {
  int d = 64;          // embedding width per distribution parameter
  int levels = 2;      // max pattern level L
  int max_len = 20;    // padded sequence length n
  double gamma = 2.0;  // score margin
  double lambda = 0.4; // bias strength
  Family family = Family::Gamma;
  Ablations ablations;
  int conj_depth = 1;  // affine layers in the conjunction scorer

  void validate() const;
};

// Raw embedding parameters are unconstrained; softplus followed by this
// floor maps them to valid (alpha, beta).
inline constexpr double kEmbeddingFloor = 0.05;

struct ProbEmbedding {
  std::vector<double> alpha;  // d entries, each >= kEmbeddingFloor
  std::vector<double> beta;
};

struct Pattern {
  int level = 1;
  int start = 1;  // 1-based window position within the sequence
  std::vector<int> items;
  ProbEmbedding embedding;  // filled by conjunction when materialized
  bool masked = false;      // window overlaps a padding position
};

struct PatternScore {
  int level = 1;
  int start = 1;
  std::vector<int> items;
  double distance = 0.0;      // Dis (0 when masked)
  double weight = 0.0;        // eta (0 when masked)
  double bias = 0.0;          // delta (0 when masked)
  double contribution = 0.0;  // (eta + lambda*delta) * (gamma - Dis)
  bool masked = false;
};

struct ScoreBreakdown {
  double total = 0.0;
  std::vector<std::vector<PatternScore>> levels;  // includes masked entries
};

// Parameter layout: one embedding table (row 0 = padding token), a
// conjunction scorer shared across items, windows and levels, and one bias
// network per level. All slots exist regardless of the ablation toggles so
// checkpoints stay shape-compatible.
struct ModelParams {
  diff::ParamStore store;
  int vocab = 0;  // item ids run 1..vocab
  int table = -1; // (vocab+1) x 2d raw parameters
  std::vector<int> conj_w, conj_b;                      // conj_depth slots
  std::vector<int> bias_w1, bias_b1, bias_w2, bias_b2;  // one slot per level

  static ModelParams init(const ModelConfig& config, int vocab,
                          std::uint64_t seed);
  // Rebuilds the slot registry for a store loaded from a checkpoint.
  static ModelParams from_store(const ModelConfig& config, int vocab,
                                diff::ParamStore store);
};

// --- elementary operations -------------------------------------------------

ProbEmbedding lookup_embedding(int item, const ModelParams& params,
                               const ModelConfig& config);

// Per-level contiguous windows over `sequence` (0 = padding). Level l yields
// exactly len - l + 1 windows in order; windows overlapping padding are
// flagged masked. Embeddings are left empty.
std::vector<std::vector<Pattern>> extract_patterns(std::span<const int> sequence,
                                                   int levels);

// Self-attentive window weights: softmax across the window, independently
// per embedding dimension, of the conjunction scorer outputs. l x d; every
// column sums to 1.
diff::Tensor attention_weights(std::span<const ProbEmbedding> items,
                               const ModelParams& params,
                               const ModelConfig& config);

// alpha_p = sum_i w_i (*) alpha_i, beta_p = sum_i w_i (*) beta_i.
ProbEmbedding conjunction(std::span<const ProbEmbedding> items,
                          const diff::Tensor& weights);

// Sum over dimensions of KL(target || pattern) in closed form.
double kl_distance(const ProbEmbedding& target, const ProbEmbedding& pattern,
                   Family family);

// Softmax of negative distances over unmasked entries; masked entries get
// exactly 0. All-masked input yields the zero vector.
std::vector<double> distance_weights(std::span<const double> distances,
                                     const std::vector<bool>& masked);

// Sequence-aware bias for one level. `embeddings` must hold exactly n
// entries (padding slots use the padding token's embedding); the first
// `pad` window positions are masked to exact zeros. Returns n - l + 1
// entries summing to 1 over the unmasked suffix.
std::vector<double> sequence_bias(std::span<const ProbEmbedding> embeddings,
                                  int pad, int level,
                                  const ModelParams& params,
                                  const ModelConfig& config);

double loss(double score_pos, double score_neg);

// --- scoring ---------------------------------------------------------------

// Candidate-independent state for one sequence: transformed embeddings,
// fused pattern representations, per-level caches and bias vectors.
struct SequenceContext {
  std::vector<int> padded;  // max_len ids, left-padded with 0
  int pad = 0;
  int len = 0;
  diff::Tensor act;    // n x 2d (transformed; raw when prob embeddings are off)
  struct Level {
    int m = 0;                       // unmasked window count
    diff::Tensor pat_a, pat_b;       // m x d fused (alpha, beta)
    diff::Tensor lg_pat_a, log_pat_b;  // Gamma KL caches
    diff::Tensor pat_sum, pat_norm;    // Beta KL caches
    diff::Tensor pat_mean;             // cosine-mode mean vectors
    std::vector<double> pat_sqnorm;    // cosine-mode squared norms
    std::vector<double> delta;         // m entries; empty when bias is off
  };
  std::vector<Level> levels;
};

class Scorer {
 public:
  Scorer(const ModelParams& params, const ModelConfig& config);

  // `items` is a chronological id sequence; leading zeros are ignored and
  // longer sequences keep the most recent max_len entries. An effectively
  // empty sequence is a scoring error.
  SequenceContext context(std::span<const int> items) const;

  double score(const SequenceContext& ctx, int candidate) const;
  ScoreBreakdown breakdown(const SequenceContext& ctx, int candidate) const;

  const ModelParams& params() const { return *params_; }
  const ModelConfig& config() const { return config_; }

 private:
  const ModelParams* params_;
  ModelConfig config_;
};

double score(std::span<const int> items, int candidate,
             const ModelParams& params, const ModelConfig& config);

// --- tape path ---------------------------------------------------------

// Candidate-independent subgraph for one sequence; shared by the positive
// and negative score nodes of a training pair.
struct SequenceGraph {
  std::vector<int> padded;
  int pad = 0;
  int len = 0;
  diff::Tape::NodeId act_a = diff::Tape::kNone;   // n x d
  diff::Tape::NodeId act_b = diff::Tape::kNone;   // n x d
  diff::Tape::NodeId plain_x = diff::Tape::kNone; // n x d (prob embeddings off)
  struct Level {
    int m = 0;
    diff::Tape::NodeId pat_a = diff::Tape::kNone;
    diff::Tape::NodeId pat_b = diff::Tape::kNone;
    diff::Tape::NodeId pat_x = diff::Tape::kNone;
    diff::Tape::NodeId lg_pat_a = diff::Tape::kNone;
    diff::Tape::NodeId log_pat_b = diff::Tape::kNone;
    diff::Tape::NodeId pat_sum = diff::Tape::kNone;
    diff::Tape::NodeId pat_norm = diff::Tape::kNone;
    diff::Tape::NodeId pat_mean = diff::Tape::kNone;
    diff::Tape::NodeId pat_sqnorm = diff::Tape::kNone;
    diff::Tape::NodeId delta = diff::Tape::kNone;
  };
  std::vector<Level> levels;
};

SequenceGraph build_sequence_graph(diff::Tape& tape, const ModelParams& params,
                                   const ModelConfig& config,
                                   std::span<const int> items);

diff::Tape::NodeId score_node(diff::Tape& tape, const ModelParams& params,
                              const ModelConfig& config,
                              const SequenceGraph& graph, int candidate);

// l = -log sigmoid(pos) - log sigmoid(-neg)
diff::Tape::NodeId loss_node(diff::Tape& tape, diff::Tape::NodeId pos,
                             diff::Tape::NodeId neg);

}  // namespace ptsr::model
