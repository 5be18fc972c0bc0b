#include "ptsr/model.hpp"

#include <algorithm>
#include <cmath>

#include "ptsr/errors.hpp"
#include "ptsr/rng.hpp"
#include "ptsr/specfn.hpp"

namespace ptsr::model {

namespace {

constexpr double kCosineEps = 1e-12;

using NodeId = diff::Tape::NodeId;
using diff::Tensor;

struct PaddedSeq {
  std::vector<int> padded;
  int pad = 0;
  int len = 0;
};

PaddedSeq normalize_sequence(std::span<const int> items, int max_len,
                             int vocab) {
  std::vector<int> real;
  real.reserve(items.size());
  bool seen_item = false;
  for (int id : items) {
    if (id == 0) {
      if (seen_item) {
        throw Error(ErrorKind::Usage, "score: padding inside the sequence");
      }
      continue;
    }
    if (id < 1 || id > vocab) {
      throw Error(ErrorKind::Usage,
                  "score: item id " + std::to_string(id) + " out of vocabulary");
    }
    seen_item = true;
    real.push_back(id);
  }
  if (real.empty()) {
    throw Error(ErrorKind::Usage, "score: sequence has no unmasked items");
  }
  if (static_cast<int>(real.size()) > max_len) {
    real.erase(real.begin(), real.end() - max_len);
  }
  PaddedSeq out;
  out.len = static_cast<int>(real.size());
  out.pad = max_len - out.len;
  out.padded.assign(max_len, 0);
  std::copy(real.begin(), real.end(), out.padded.begin() + out.pad);
  return out;
}

void check_item(int item, int vocab, const char* what) {
  if (item < 0 || item > vocab) {
    throw Error(ErrorKind::Usage, std::string(what) + ": unknown item id " +
                                      std::to_string(item));
  }
}

double transform_raw(double raw) {
  return std::max(specfn::softplus(raw), kEmbeddingFloor);
}

// Column-wise softmax across rows, matching Tape::softmax_cols.
void softmax_cols_inplace(Tensor& t) {
  for (int c = 0; c < t.cols; ++c) {
    double hi = t.at(0, c);
    for (int r = 1; r < t.rows; ++r) hi = std::max(hi, t.at(r, c));
    double sum = 0.0;
    for (int r = 0; r < t.rows; ++r) {
      const double e = std::exp(t.at(r, c) - hi);
      t.at(r, c) = e;
      sum += e;
    }
    for (int r = 0; r < t.rows; ++r) t.at(r, c) /= sum;
  }
}

// y = x W^T + b for row-major x (m x k), W (out x k), b (out).
Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor* b) {
  Tensor out(x.rows, w.rows);
  for (int r = 0; r < x.rows; ++r) {
    const double* xrow = &x.data[static_cast<std::size_t>(r) * x.cols];
    for (int o = 0; o < w.rows; ++o) {
      const double* wrow = &w.data[static_cast<std::size_t>(o) * w.cols];
      double s = b ? b->data[o] : 0.0;
      for (int k = 0; k < x.cols; ++k) s += xrow[k] * wrow[k];
      out.at(r, o) = s;
    }
  }
  return out;
}

// Conjunction scorer stack applied row-wise: affine 2d->d, then
// (tanh, affine d->d) for each extra layer.
Tensor conj_scores(const Tensor& rows, const ModelParams& params) {
  Tensor h = linear_forward(rows, params.store.value(params.conj_w[0]),
                            &params.store.value(params.conj_b[0]));
  for (std::size_t layer = 1; layer < params.conj_w.size(); ++layer) {
    for (double& v : h.data) v = std::tanh(v);
    h = linear_forward(h, params.store.value(params.conj_w[layer]),
                       &params.store.value(params.conj_b[layer]));
  }
  return h;
}

}  // namespace

std::string family_name(Family f) {
  return f == Family::Gamma ? "gamma" : "beta";
}

Family family_from_name(const std::string& name) {
  if (name == "gamma") return Family::Gamma;
  if (name == "beta") return Family::Beta;
  throw Error(ErrorKind::Usage, "unknown distribution family: " + name);
}

void ModelConfig::validate() const {
  if (d < 1) throw_usage("model: d must be >= 1");
  if (max_len < 1) throw_usage("model: max_len must be >= 1");
  if (levels < 1 || levels > max_len) {
    throw_usage("model: levels must satisfy 1 <= L <= max_len");
  }
  if (!(gamma > 0.0)) throw_usage("model: gamma must be > 0");
  if (lambda < 0.0) throw_usage("model: lambda must be >= 0");
  if (conj_depth < 1) throw_usage("model: conj_depth must be >= 1");
}

ModelParams ModelParams::init(const ModelConfig& config, int vocab,
                              std::uint64_t seed) {
  config.validate();
  if (vocab < 1) throw_usage("model: vocabulary must not be empty");
  const int d = config.d;
  const int n = config.max_len;
  auto gen = rng::engine(seed);

  auto normal_tensor = [&gen](int rows, int cols, double mean, double sd) {
    Tensor t(rows, cols);
    for (double& v : t.data) v = mean + sd * rng::normal(gen);
    return t;
  };

  ModelParams p;
  p.vocab = vocab;
  p.table = p.store.add("embedding_table",
                        normal_tensor(vocab + 1, 2 * d, 0.5, 0.02));
  for (int layer = 0; layer < config.conj_depth; ++layer) {
    const int in = layer == 0 ? 2 * d : d;
    const std::string tag = "conj_w" + std::to_string(layer);
    p.conj_w.push_back(p.store.add(tag, normal_tensor(d, in, 0.0, 0.02)));
    p.conj_b.push_back(
        p.store.add("conj_b" + std::to_string(layer), Tensor(1, d)));
  }
  for (int level = 1; level <= config.levels; ++level) {
    const int out = n - level + 1;
    const std::string suffix = "_l" + std::to_string(level);
    p.bias_w1.push_back(
        p.store.add("bias_w1" + suffix, normal_tensor(d, n * d, 0.0, 0.02)));
    p.bias_b1.push_back(p.store.add("bias_b1" + suffix, Tensor(1, d)));
    p.bias_w2.push_back(
        p.store.add("bias_w2" + suffix, normal_tensor(out, d, 0.0, 0.02)));
    p.bias_b2.push_back(p.store.add("bias_b2" + suffix, Tensor(1, out)));
  }
  return p;
}

ModelParams ModelParams::from_store(const ModelConfig& config, int vocab,
                                    diff::ParamStore store) {
  ModelParams expected = ModelParams::init(config, vocab, 0);
  if (store.count() != expected.store.count()) {
    throw_usage("model: parameter store does not match the configuration");
  }
  for (int s = 0; s < store.count(); ++s) {
    if (store.name(s) != expected.store.name(s) ||
        !store.value(s).same_shape(expected.store.value(s))) {
      throw_usage("model: parameter slot " + store.name(s) +
                  " does not match the configuration");
    }
  }
  ModelParams p = std::move(expected);
  p.store = std::move(store);
  return p;
}

// ---------------------------------------------------------------------------
// elementary operations

ProbEmbedding lookup_embedding(int item, const ModelParams& params,
                               const ModelConfig& config) {
  check_item(item, params.vocab, "lookup_embedding");
  const Tensor& table = params.store.value(params.table);
  ProbEmbedding e;
  e.alpha.resize(config.d);
  e.beta.resize(config.d);
  for (int c = 0; c < config.d; ++c) {
    e.alpha[c] = transform_raw(table.at(item, c));
    e.beta[c] = transform_raw(table.at(item, config.d + c));
  }
  return e;
}

std::vector<std::vector<Pattern>> extract_patterns(
    std::span<const int> sequence, int levels) {
  const int n = static_cast<int>(sequence.size());
  if (levels < 1 || levels > n) {
    throw_usage("extract_patterns: levels must satisfy 1 <= L <= sequence length");
  }
  std::vector<std::vector<Pattern>> out(levels);
  for (int l = 1; l <= levels; ++l) {
    auto& list = out[l - 1];
    list.reserve(n - l + 1);
    for (int k = 0; k + l <= n; ++k) {
      Pattern pat;
      pat.level = l;
      pat.start = k + 1;
      pat.items.assign(sequence.begin() + k, sequence.begin() + k + l);
      pat.masked = std::find(pat.items.begin(), pat.items.end(), 0) !=
                   pat.items.end();
      list.push_back(std::move(pat));
    }
  }
  return out;
}

diff::Tensor attention_weights(std::span<const ProbEmbedding> items,
                               const ModelParams& params,
                               const ModelConfig& config) {
  if (items.empty()) throw_usage("attention_weights: empty window");
  const int l = static_cast<int>(items.size());
  const int d = config.d;
  Tensor rows(l, 2 * d);
  for (int i = 0; i < l; ++i) {
    for (int c = 0; c < d; ++c) {
      rows.at(i, c) = items[i].alpha[c];
      rows.at(i, d + c) = items[i].beta[c];
    }
  }
  Tensor scores = conj_scores(rows, params);
  softmax_cols_inplace(scores);
  return scores;
}

ProbEmbedding conjunction(std::span<const ProbEmbedding> items,
                          const diff::Tensor& weights) {
  if (items.empty()) throw_usage("conjunction: empty window");
  const int l = static_cast<int>(items.size());
  const int d = static_cast<int>(items[0].alpha.size());
  if (weights.rows != l || weights.cols != d) {
    throw_usage("conjunction: weight shape does not match the window");
  }
  ProbEmbedding out;
  out.alpha.assign(d, 0.0);
  out.beta.assign(d, 0.0);
  for (int i = 0; i < l; ++i) {
    for (int c = 0; c < d; ++c) {
      out.alpha[c] += weights.at(i, c) * items[i].alpha[c];
      out.beta[c] += weights.at(i, c) * items[i].beta[c];
    }
  }
  return out;
}

double kl_distance(const ProbEmbedding& target, const ProbEmbedding& pattern,
                   Family family) {
  const std::size_t d = target.alpha.size();
  if (pattern.alpha.size() != d || target.beta.size() != d ||
      pattern.beta.size() != d) {
    throw_usage("kl_distance: embedding widths do not match");
  }
  double dis = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double a1 = target.alpha[i], b1 = target.beta[i];
    const double a2 = pattern.alpha[i], b2 = pattern.beta[i];
    if (family == Family::Gamma) {
      // shape-rate convention
      dis += (a1 - a2) * specfn::digamma(a1) - specfn::lgamma(a1) +
             specfn::lgamma(a2) + a2 * (std::log(b1) - std::log(b2)) +
             a1 * (b2 - b1) / b1;
    } else {
      dis += specfn::lgamma(a1 + b1) - specfn::lgamma(a1) - specfn::lgamma(b1) -
             specfn::lgamma(a2 + b2) + specfn::lgamma(a2) + specfn::lgamma(b2) +
             (a1 - a2) * specfn::digamma(a1) + (b1 - b2) * specfn::digamma(b1) +
             (a2 - a1 + b2 - b1) * specfn::digamma(a1 + b1);
    }
  }
  return dis;
}

std::vector<double> distance_weights(std::span<const double> distances,
                                     const std::vector<bool>& masked) {
  if (distances.size() != masked.size()) {
    throw_usage("distance_weights: mask length mismatch");
  }
  std::vector<double> out(distances.size(), 0.0);
  std::vector<double> neg;
  neg.reserve(distances.size());
  for (std::size_t i = 0; i < distances.size(); ++i) {
    if (!masked[i]) neg.push_back(-distances[i]);
  }
  if (neg.empty()) return out;  // fully masked level: zero contribution
  specfn::softmax_inplace(neg);
  std::size_t j = 0;
  for (std::size_t i = 0; i < distances.size(); ++i) {
    if (!masked[i]) out[i] = neg[j++];
  }
  return out;
}

std::vector<double> sequence_bias(std::span<const ProbEmbedding> embeddings,
                                  int pad, int level,
                                  const ModelParams& params,
                                  const ModelConfig& config) {
  const int n = config.max_len;
  const int d = config.d;
  if (static_cast<int>(embeddings.size()) != n) {
    throw_usage("sequence_bias: expected exactly max_len embeddings");
  }
  if (level < 1 || level > config.levels) {
    throw_usage("sequence_bias: level out of range");
  }
  if (pad < 0 || pad >= n) throw_usage("sequence_bias: bad padding count");

  Tensor flat(1, n * d);
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < d; ++c) {
      const double a = embeddings[i].alpha[c];
      const double b = embeddings[i].beta[c];
      flat.at(0, i * d + c) = a / (a + b);
    }
  }
  Tensor h = linear_forward(flat, params.store.value(params.bias_w1[level - 1]),
                            &params.store.value(params.bias_b1[level - 1]));
  for (double& v : h.data) v = std::tanh(v);
  Tensor logits =
      linear_forward(h, params.store.value(params.bias_w2[level - 1]),
                     &params.store.value(params.bias_b2[level - 1]));

  const int total = n - level + 1;
  const int m = total - pad;
  std::vector<double> out(total, 0.0);
  if (m < 1) return out;
  std::vector<double> un(logits.data.begin() + pad, logits.data.end());
  specfn::softmax_inplace(un);
  std::copy(un.begin(), un.end(), out.begin() + pad);
  return out;
}

double loss(double score_pos, double score_neg) {
  if (!std::isfinite(score_pos) || !std::isfinite(score_neg)) {
    throw_numeric("loss: non-finite score");
  }
  return -specfn::log_sigmoid(score_pos) - specfn::log_sigmoid(-score_neg);
}

// ---------------------------------------------------------------------------
// plain scoring path

Scorer::Scorer(const ModelParams& params, const ModelConfig& config)
    : params_(&params), config_(config) {
  config_.validate();
}

SequenceContext Scorer::context(std::span<const int> items) const {
  const ModelConfig& cfg = config_;
  const int n = cfg.max_len;
  const int d = cfg.d;
  const bool probe = cfg.ablations.use_prob_embedding;

  PaddedSeq seq = normalize_sequence(items, n, params_->vocab);
  SequenceContext ctx;
  ctx.padded = seq.padded;
  ctx.pad = seq.pad;
  ctx.len = seq.len;

  const Tensor& table = params_->store.value(params_->table);
  ctx.act = Tensor(n, 2 * d);
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < 2 * d; ++c) {
      const double raw = table.at(ctx.padded[i], c);
      ctx.act.at(i, c) = probe ? transform_raw(raw) : raw;
    }
  }
  Tensor scores = conj_scores(ctx.act, *params_);

  ctx.levels.resize(cfg.levels);
  for (int l = 1; l <= cfg.levels; ++l) {
    auto& lv = ctx.levels[l - 1];
    lv.m = std::max(0, ctx.len - l + 1);
    if (lv.m == 0) continue;
    lv.pat_a = Tensor(lv.m, d);
    lv.pat_b = Tensor(lv.m, d);
    for (int w = 0; w < lv.m; ++w) {
      const int s = ctx.pad + w;
      if (l == 1) {
        for (int c = 0; c < d; ++c) {
          lv.pat_a.at(w, c) = ctx.act.at(s, c);
          lv.pat_b.at(w, c) = ctx.act.at(s, d + c);
        }
        continue;
      }
      Tensor win(l, d);
      for (int i = 0; i < l; ++i)
        for (int c = 0; c < d; ++c) win.at(i, c) = scores.at(s + i, c);
      softmax_cols_inplace(win);
      for (int i = 0; i < l; ++i) {
        for (int c = 0; c < d; ++c) {
          lv.pat_a.at(w, c) += win.at(i, c) * ctx.act.at(s + i, c);
          lv.pat_b.at(w, c) += win.at(i, c) * ctx.act.at(s + i, d + c);
        }
      }
    }

    if (probe && cfg.ablations.use_kl) {
      if (cfg.family == Family::Gamma) {
        lv.lg_pat_a = Tensor(lv.m, d);
        lv.log_pat_b = Tensor(lv.m, d);
        for (int i = 0; i < lv.m * d; ++i) {
          lv.lg_pat_a.data[i] = specfn::lgamma(lv.pat_a.data[i]);
          lv.log_pat_b.data[i] = std::log(lv.pat_b.data[i]);
        }
      } else {
        lv.pat_sum = Tensor(lv.m, d);
        lv.pat_norm = Tensor(lv.m, d);
        for (int i = 0; i < lv.m * d; ++i) {
          const double s = lv.pat_a.data[i] + lv.pat_b.data[i];
          lv.pat_sum.data[i] = s;
          lv.pat_norm.data[i] = specfn::lgamma(lv.pat_a.data[i]) +
                                specfn::lgamma(lv.pat_b.data[i]) -
                                specfn::lgamma(s);
        }
      }
    } else {
      // cosine modes: mean vectors (or the plain fused vectors)
      lv.pat_mean = Tensor(lv.m, d);
      for (int i = 0; i < lv.m * d; ++i) {
        if (!probe) {
          lv.pat_mean.data[i] = lv.pat_a.data[i];
        } else if (cfg.family == Family::Gamma) {
          lv.pat_mean.data[i] = lv.pat_a.data[i] / lv.pat_b.data[i];
        } else {
          lv.pat_mean.data[i] =
              lv.pat_a.data[i] / (lv.pat_a.data[i] + lv.pat_b.data[i]);
        }
      }
      lv.pat_sqnorm.assign(lv.m, 0.0);
      for (int w = 0; w < lv.m; ++w) {
        double s = 0.0;
        for (int c = 0; c < d; ++c) s += lv.pat_mean.at(w, c) * lv.pat_mean.at(w, c);
        lv.pat_sqnorm[w] = s;
      }
    }

    if (cfg.ablations.use_bias) {
      Tensor flat(1, n * d);
      for (int i = 0; i < n; ++i) {
        for (int c = 0; c < d; ++c) {
          if (probe) {
            const double a = ctx.act.at(i, c);
            const double b = ctx.act.at(i, d + c);
            flat.at(0, i * d + c) = a / (a + b);
          } else {
            flat.at(0, i * d + c) = ctx.act.at(i, c);
          }
        }
      }
      Tensor h =
          linear_forward(flat, params_->store.value(params_->bias_w1[l - 1]),
                         &params_->store.value(params_->bias_b1[l - 1]));
      for (double& v : h.data) v = std::tanh(v);
      Tensor logits =
          linear_forward(h, params_->store.value(params_->bias_w2[l - 1]),
                         &params_->store.value(params_->bias_b2[l - 1]));
      std::vector<double> un(logits.data.begin() + ctx.pad, logits.data.end());
      specfn::softmax_inplace(un);
      lv.delta = std::move(un);
    }
  }
  return ctx;
}

namespace {

// Per-candidate target caches for the fast KL evaluation.
struct TargetTerms {
  std::vector<double> t1, t2, t3, t4;  // family-specific
  std::vector<double> mean;
  double sqnorm = 0.0;
};

TargetTerms target_terms(const Tensor& table, int cand, const ModelConfig& cfg) {
  const int d = cfg.d;
  const bool probe = cfg.ablations.use_prob_embedding;
  TargetTerms t;
  if (!probe) {
    t.mean.resize(d);
    for (int c = 0; c < d; ++c) t.mean[c] = table.at(cand, c);
  } else {
    std::vector<double> a(d), b(d);
    for (int c = 0; c < d; ++c) {
      a[c] = transform_raw(table.at(cand, c));
      b[c] = transform_raw(table.at(cand, d + c));
    }
    if (!cfg.ablations.use_kl) {
      t.mean.resize(d);
      for (int c = 0; c < d; ++c)
        t.mean[c] = cfg.family == Family::Gamma ? a[c] / b[c] : a[c] / (a[c] + b[c]);
    } else if (cfg.family == Family::Gamma) {
      t.t1.resize(d);
      t.t2.resize(d);
      t.t3.resize(d);
      t.t4.resize(d);
      for (int c = 0; c < d; ++c) {
        t.t1[c] = specfn::digamma(a[c]);
        t.t2[c] = a[c] * t.t1[c] - specfn::lgamma(a[c]) - a[c];
        t.t3[c] = std::log(b[c]);
        t.t4[c] = a[c] / b[c];
      }
    } else {
      t.t1.resize(d);
      t.t2.resize(d);
      t.t3.resize(d);  // psi(a1+b1)
      t.t4.resize(d);  // U0
      for (int c = 0; c < d; ++c) {
        const double s = a[c] + b[c];
        t.t1[c] = specfn::digamma(a[c]);
        t.t2[c] = specfn::digamma(b[c]);
        t.t3[c] = specfn::digamma(s);
        t.t4[c] = specfn::lgamma(s) - specfn::lgamma(a[c]) -
                  specfn::lgamma(b[c]) + a[c] * t.t1[c] + b[c] * t.t2[c] -
                  s * t.t3[c];
      }
    }
  }
  if (!t.mean.empty()) {
    for (double v : t.mean) t.sqnorm += v * v;
  }
  return t;
}

std::vector<double> level_distances(const SequenceContext::Level& lv,
                                    const TargetTerms& t,
                                    const ModelConfig& cfg) {
  const int d = cfg.d;
  std::vector<double> dis(lv.m, 0.0);
  const bool kl = cfg.ablations.use_prob_embedding && cfg.ablations.use_kl;
  if (kl && cfg.family == Family::Gamma) {
    for (int w = 0; w < lv.m; ++w) {
      double s = 0.0;
      for (int c = 0; c < d; ++c) {
        const double a2 = lv.pat_a.at(w, c);
        const double b2 = lv.pat_b.at(w, c);
        s += t.t2[c] + lv.lg_pat_a.at(w, c) +
             a2 * (t.t3[c] - lv.log_pat_b.at(w, c)) + t.t4[c] * b2 -
             a2 * t.t1[c];
      }
      dis[w] = s;
    }
  } else if (kl) {
    for (int w = 0; w < lv.m; ++w) {
      double s = 0.0;
      for (int c = 0; c < d; ++c) {
        s += t.t4[c] + lv.pat_norm.at(w, c) - lv.pat_a.at(w, c) * t.t1[c] -
             lv.pat_b.at(w, c) * t.t2[c] + lv.pat_sum.at(w, c) * t.t3[c];
      }
      dis[w] = s;
    }
  } else {
    for (int w = 0; w < lv.m; ++w) {
      double dot = 0.0;
      for (int c = 0; c < d; ++c) dot += lv.pat_mean.at(w, c) * t.mean[c];
      const double norm = std::sqrt(lv.pat_sqnorm[w] * t.sqnorm + kCosineEps);
      dis[w] = -(dot / norm);
    }
  }
  return dis;
}

}  // namespace

double Scorer::score(const SequenceContext& ctx, int candidate) const {
  check_item(candidate, params_->vocab, "score");
  const TargetTerms t =
      target_terms(params_->store.value(params_->table), candidate, config_);
  double total = 0.0;
  for (const auto& lv : ctx.levels) {
    if (lv.m == 0) continue;
    const std::vector<double> dis = level_distances(lv, t, config_);
    std::vector<double> eta;
    if (config_.ablations.use_weight) {
      std::vector<double> neg(lv.m);
      for (int w = 0; w < lv.m; ++w) neg[w] = -dis[w];
      specfn::softmax_inplace(neg);
      eta = std::move(neg);
    } else {
      eta.assign(lv.m, 1.0);
    }
    const double lambda = config_.ablations.use_bias ? config_.lambda : 0.0;
    for (int w = 0; w < lv.m; ++w) {
      const double corr = eta[w] + (lambda != 0.0 ? lambda * lv.delta[w] : 0.0);
      total += corr * (config_.gamma - dis[w]);
    }
  }
  return total;
}

ScoreBreakdown Scorer::breakdown(const SequenceContext& ctx,
                                 int candidate) const {
  check_item(candidate, params_->vocab, "breakdown");
  const TargetTerms t =
      target_terms(params_->store.value(params_->table), candidate, config_);
  ScoreBreakdown out;
  out.levels.resize(config_.levels);
  for (int l = 1; l <= config_.levels; ++l) {
    const auto& lv = ctx.levels[l - 1];
    auto& rows = out.levels[l - 1];
    const int total_windows = config_.max_len - l + 1;
    rows.resize(total_windows);
    for (int k = 0; k < total_windows; ++k) {
      auto& ps = rows[k];
      ps.level = l;
      ps.start = k + 1;
      ps.items.assign(ctx.padded.begin() + k, ctx.padded.begin() + k + l);
      ps.masked = k < ctx.pad;
    }
    if (lv.m == 0) continue;
    const std::vector<double> dis = level_distances(lv, t, config_);
    std::vector<double> eta;
    if (config_.ablations.use_weight) {
      std::vector<double> neg(lv.m);
      for (int w = 0; w < lv.m; ++w) neg[w] = -dis[w];
      specfn::softmax_inplace(neg);
      eta = std::move(neg);
    } else {
      eta.assign(lv.m, 1.0);
    }
    const double lambda = config_.ablations.use_bias ? config_.lambda : 0.0;
    for (int w = 0; w < lv.m; ++w) {
      auto& ps = rows[ctx.pad + w];
      ps.distance = dis[w];
      ps.weight = eta[w];
      ps.bias = config_.ablations.use_bias ? lv.delta[w] : 0.0;
      const double corr = ps.weight + lambda * ps.bias;
      ps.contribution = corr * (config_.gamma - dis[w]);
      out.total += ps.contribution;
    }
  }
  return out;
}

double score(std::span<const int> items, int candidate,
             const ModelParams& params, const ModelConfig& config) {
  Scorer scorer(params, config);
  return scorer.score(scorer.context(items), candidate);
}

// ---------------------------------------------------------------------------
// tape path

namespace {

struct TapeHelpers {
  diff::Tape& tape;
  NodeId eps_node = diff::Tape::kNone;

  NodeId cosine_norm(NodeId sq_a, NodeId sq_b) {
    if (eps_node == diff::Tape::kNone) {
      eps_node = tape.constant_scalar(kCosineEps);
    }
    return tape.sqrt(tape.add(tape.mul(sq_a, sq_b), eps_node));
  }
};

NodeId conj_scores_node(diff::Tape& tape, const ModelParams& params,
                        NodeId rows) {
  NodeId h = tape.linear(rows, tape.param(params.conj_w[0]),
                         tape.param(params.conj_b[0]));
  for (std::size_t layer = 1; layer < params.conj_w.size(); ++layer) {
    h = tape.linear(tape.tanh(h), tape.param(params.conj_w[layer]),
                    tape.param(params.conj_b[layer]));
  }
  return h;
}

}  // namespace

SequenceGraph build_sequence_graph(diff::Tape& tape, const ModelParams& params,
                                   const ModelConfig& config,
                                   std::span<const int> items) {
  config.validate();
  const int n = config.max_len;
  const int d = config.d;
  const bool probe = config.ablations.use_prob_embedding;

  PaddedSeq seq = normalize_sequence(items, n, params.vocab);
  SequenceGraph g;
  g.padded = seq.padded;
  g.pad = seq.pad;
  g.len = seq.len;

  const NodeId table = tape.param(params.table);
  const NodeId raw = tape.gather_rows(table, g.padded);
  NodeId act = raw;
  if (probe) {
    act = tape.clamp_min(tape.softplus(raw), kEmbeddingFloor);
    g.act_a = tape.block(act, 0, n, 0, d);
    g.act_b = tape.block(act, 0, n, d, d);
  } else {
    g.plain_x = tape.block(raw, 0, n, 0, d);
  }
  const NodeId scores = conj_scores_node(tape, params, act);

  // Bias input: e_i = alpha_i / (alpha_i + beta_i), flattened in order.
  NodeId e_flat = diff::Tape::kNone;
  if (config.ablations.use_bias) {
    const NodeId e = probe
                         ? tape.div(g.act_a, tape.add(g.act_a, g.act_b))
                         : g.plain_x;
    e_flat = tape.reshape(e, 1, n * d);
  }

  g.levels.resize(config.levels);
  for (int l = 1; l <= config.levels; ++l) {
    auto& lv = g.levels[l - 1];
    lv.m = std::max(0, g.len - l + 1);
    if (lv.m == 0) continue;

    const NodeId src_a = probe ? g.act_a : g.plain_x;
    if (l == 1) {
      lv.pat_a = tape.block(src_a, g.pad, lv.m, 0, d);
      if (probe) lv.pat_b = tape.block(g.act_b, g.pad, lv.m, 0, d);
    } else {
      std::vector<NodeId> rows_a, rows_b;
      rows_a.reserve(lv.m);
      rows_b.reserve(lv.m);
      for (int w = 0; w < lv.m; ++w) {
        const int s = g.pad + w;
        const NodeId win = tape.softmax_cols(tape.block(scores, s, l, 0, d));
        rows_a.push_back(
            tape.col_sums(tape.mul(win, tape.block(src_a, s, l, 0, d))));
        if (probe) {
          rows_b.push_back(
              tape.col_sums(tape.mul(win, tape.block(g.act_b, s, l, 0, d))));
        }
      }
      lv.pat_a = tape.concat_rows(rows_a);
      if (probe) lv.pat_b = tape.concat_rows(rows_b);
    }
    if (!probe) {
      lv.pat_x = lv.pat_a;
      lv.pat_a = diff::Tape::kNone;
    }

    if (probe && config.ablations.use_kl) {
      if (config.family == Family::Gamma) {
        lv.lg_pat_a = tape.lgamma(lv.pat_a);
        lv.log_pat_b = tape.log(lv.pat_b);
      } else {
        lv.pat_sum = tape.add(lv.pat_a, lv.pat_b);
        lv.pat_norm = tape.sub(
            tape.add(tape.lgamma(lv.pat_a), tape.lgamma(lv.pat_b)),
            tape.lgamma(lv.pat_sum));
      }
    } else {
      NodeId mean;
      if (!probe) {
        mean = lv.pat_x;
      } else if (config.family == Family::Gamma) {
        mean = tape.div(lv.pat_a, lv.pat_b);
      } else {
        mean = tape.div(lv.pat_a, tape.add(lv.pat_a, lv.pat_b));
      }
      lv.pat_mean = mean;
      lv.pat_sqnorm = tape.row_sums(tape.mul(mean, mean));
    }

    if (config.ablations.use_bias) {
      const NodeId h = tape.tanh(tape.linear(e_flat,
                                             tape.param(params.bias_w1[l - 1]),
                                             tape.param(params.bias_b1[l - 1])));
      const NodeId logits = tape.linear(h, tape.param(params.bias_w2[l - 1]),
                                        tape.param(params.bias_b2[l - 1]));
      const NodeId un = tape.block(logits, 0, 1, g.pad, lv.m);
      lv.delta = tape.softmax_cols(tape.reshape(un, lv.m, 1));
    }
  }
  return g;
}

diff::Tape::NodeId score_node(diff::Tape& tape, const ModelParams& params,
                              const ModelConfig& config,
                              const SequenceGraph& g, int candidate) {
  check_item(candidate, params.vocab, "score");
  const int d = config.d;
  const bool probe = config.ablations.use_prob_embedding;
  const bool kl = probe && config.ablations.use_kl;
  TapeHelpers helpers{tape};

  const NodeId table = tape.param(params.table);
  const NodeId crow = tape.gather_rows(table, {candidate});
  NodeId ca = diff::Tape::kNone, cb = diff::Tape::kNone;
  NodeId cmean = diff::Tape::kNone, c_sq = diff::Tape::kNone;
  NodeId t1 = diff::Tape::kNone, t2 = diff::Tape::kNone,
         t3 = diff::Tape::kNone, t4 = diff::Tape::kNone;

  if (probe) {
    const NodeId cact = tape.clamp_min(tape.softplus(crow), kEmbeddingFloor);
    ca = tape.block(cact, 0, 1, 0, d);
    cb = tape.block(cact, 0, 1, d, d);
  } else {
    cmean = tape.block(crow, 0, 1, 0, d);
  }

  if (kl) {
    if (config.family == Family::Gamma) {
      t1 = tape.digamma(ca);
      t2 = tape.sub(tape.sub(tape.mul(ca, t1), tape.lgamma(ca)), ca);
      t3 = tape.log(cb);
      t4 = tape.div(ca, cb);
    } else {
      const NodeId csum = tape.add(ca, cb);
      t1 = tape.digamma(ca);
      t2 = tape.digamma(cb);
      t3 = tape.digamma(csum);
      const NodeId norm = tape.sub(
          tape.lgamma(csum), tape.add(tape.lgamma(ca), tape.lgamma(cb)));
      t4 = tape.sub(tape.add(norm, tape.add(tape.mul(ca, t1), tape.mul(cb, t2))),
                    tape.mul(csum, t3));
    }
  } else if (probe) {
    cmean = config.family == Family::Gamma ? tape.div(ca, cb)
                                           : tape.div(ca, tape.add(ca, cb));
  }
  if (cmean != diff::Tape::kNone) {
    c_sq = tape.row_sums(tape.mul(cmean, cmean));
  }

  const NodeId gamma_node = tape.constant_scalar(config.gamma);
  const double lambda = config.ablations.use_bias ? config.lambda : 0.0;
  const NodeId lambda_node =
      lambda != 0.0 ? tape.constant_scalar(lambda) : diff::Tape::kNone;

  NodeId total = diff::Tape::kNone;
  for (const auto& lv : g.levels) {
    if (lv.m == 0) continue;
    NodeId dis;
    if (kl && config.family == Family::Gamma) {
      const NodeId klmat = tape.add(
          tape.add(tape.broadcast_rows(t2, lv.m), lv.lg_pat_a),
          tape.add(
              tape.mul(lv.pat_a,
                       tape.sub(tape.broadcast_rows(t3, lv.m), lv.log_pat_b)),
              tape.sub(tape.mul(tape.broadcast_rows(t4, lv.m), lv.pat_b),
                       tape.mul(lv.pat_a, tape.broadcast_rows(t1, lv.m)))));
      dis = tape.row_sums(klmat);
    } else if (kl) {
      const NodeId klmat = tape.add(
          tape.add(tape.broadcast_rows(t4, lv.m), lv.pat_norm),
          tape.sub(tape.mul(lv.pat_sum, tape.broadcast_rows(t3, lv.m)),
                   tape.add(tape.mul(lv.pat_a, tape.broadcast_rows(t1, lv.m)),
                            tape.mul(lv.pat_b, tape.broadcast_rows(t2, lv.m)))));
      dis = tape.row_sums(klmat);
    } else {
      const NodeId dots = tape.linear(lv.pat_mean, cmean, diff::Tape::kNone);
      const NodeId norm = helpers.cosine_norm(lv.pat_sqnorm, c_sq);
      dis = tape.neg(tape.div(dots, norm));
    }

    NodeId eta;
    if (config.ablations.use_weight) {
      eta = tape.softmax_cols(tape.neg(dis));
    } else {
      eta = tape.constant(Tensor(lv.m, 1, 1.0));
    }
    NodeId corr = eta;
    if (lambda_node != diff::Tape::kNone) {
      corr = tape.add(eta, tape.mul(lv.delta, lambda_node));
    }
    const NodeId term = tape.mul(corr, tape.sub(gamma_node, dis));
    const NodeId level_score = tape.sum(term);
    total = total == diff::Tape::kNone ? level_score
                                       : tape.add(total, level_score);
  }
  if (total == diff::Tape::kNone) {
    throw Error(ErrorKind::Usage, "score: sequence has no unmasked items");
  }
  return total;
}

diff::Tape::NodeId loss_node(diff::Tape& tape, diff::Tape::NodeId pos,
                             diff::Tape::NodeId neg) {
  return tape.neg(
      tape.add(tape.log_sigmoid(pos), tape.log_sigmoid(tape.neg(neg))));
}

}  // namespace ptsr::model
