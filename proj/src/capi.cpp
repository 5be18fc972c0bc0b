#include "ptsr.h"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "ptsr/data.hpp"
#include "ptsr/errors.hpp"
#include "ptsr/eval.hpp"
#include "ptsr/model.hpp"
#include "ptsr/rng.hpp"
#include "ptsr/synth.hpp"
#include "ptsr/train.hpp"

namespace {

using nlohmann::json;
namespace fs = std::filesystem;
using namespace ptsr;

constexpr const char* kVersion = "0.1.0";

thread_local std::string g_last_error;

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out != nullptr) std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

ptsr_status status_of(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Usage:
      return PTSR_ERROR_USAGE;
    case ErrorKind::Io:
      return PTSR_ERROR_IO;
    case ErrorKind::Numeric:
      return PTSR_ERROR_NUMERIC;
    case ErrorKind::Internal:
      return PTSR_ERROR_INTERNAL;
  }
  return PTSR_ERROR_INTERNAL;
}

template <class F>
ptsr_status guarded(F&& body) {
  try {
    body();
    g_last_error.clear();
    return PTSR_OK;
  } catch (const Error& e) {
    g_last_error = e.what();
    return status_of(e.kind());
  } catch (const json::exception& e) {
    g_last_error = std::string("json: ") + e.what();
    return PTSR_ERROR_USAGE;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return PTSR_ERROR_INTERNAL;
  }
}

json parse_options(const char* options_json) {
  if (options_json == nullptr) throw_usage("options must not be null");
  try {
    return json::parse(options_json);
  } catch (const json::exception& e) {
    throw_usage(std::string("options: invalid json: ") + e.what());
  }
}

void emit(char** out, const json& doc) {
  if (out != nullptr) *out = dup_string(doc.dump());
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorKind::Io, "cannot write " + path);
  f << text;
  if (!f) throw Error(ErrorKind::Io, "write failed for " + path);
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw Error(ErrorKind::Io, "cannot create output directory " + dir);
  }
}

std::string hex64(std::uint64_t v) {
  std::ostringstream ss;
  ss << std::hex << v;
  return ss.str();
}

// ---------------------------------------------------------------------------
// synth config

synth::SynthConfig synth_config_from_json(const json& doc) {
  if (doc.value("preset", "") == "reference") {
    return synth::SynthConfig::reference();
  }
  synth::SynthConfig cfg;
  cfg.vocab = doc.value("vocab", cfg.vocab);
  cfg.users = doc.value("users", cfg.users);
  cfg.len_min = doc.value("len_min", cfg.len_min);
  cfg.len_max = doc.value("len_max", cfg.len_max);
  cfg.noise = doc.value("noise", cfg.noise);
  cfg.seed = doc.value("seed", cfg.seed);
  if (!doc.contains("rules")) throw_usage("synth config: missing field 'rules'");
  const auto& rules = doc.at("rules");
  if (rules.is_object()) {
    cfg.rules = synth::SynthConfig::random_rules(
        rules.value("one_item", 0), rules.value("two_item", 0),
        rules.value("prob", 0.9), cfg.vocab,
        rules.value("seed", cfg.seed));
  } else if (rules.is_array()) {
    for (const auto& r : rules) {
      synth::PlantedRule rule;
      rule.antecedent = r.at("antecedent").get<std::vector<int>>();
      rule.consequent = r.at("consequent").get<int>();
      rule.prob = r.value("prob", 1.0);
      cfg.rules.push_back(std::move(rule));
    }
  } else {
    throw_usage("synth config: 'rules' must be an object or an array");
  }
  cfg.validate();
  return cfg;
}

json synth_config_to_json(const synth::SynthConfig& cfg) {
  json rules = json::array();
  for (const auto& r : cfg.rules) {
    rules.push_back({{"antecedent", r.antecedent},
                     {"consequent", r.consequent},
                     {"prob", r.prob}});
  }
  return {{"vocab", cfg.vocab},   {"users", cfg.users},
          {"len_min", cfg.len_min}, {"len_max", cfg.len_max},
          {"noise", cfg.noise},   {"seed", cfg.seed},
          {"rules", rules}};
}

// ---------------------------------------------------------------------------
// train options

struct TrainOptions {
  std::string data_path;
  std::string out_dir;
  std::string resume_path;
  train::TrainConfig cfg;
  std::uint64_t seed = 42;
};

TrainOptions train_options_from_json(const json& doc, int bundle_max_len) {
  TrainOptions opt;
  opt.data_path = doc.at("data").get<std::string>();
  opt.out_dir = doc.value("out_dir", "");
  opt.resume_path = doc.value("resume", "");
  opt.seed = doc.value("seed", 42ull);

  auto& m = opt.cfg.model;
  m.d = doc.value("d", 64);
  m.levels = doc.value("levels", 2);
  m.max_len = bundle_max_len;
  m.gamma = doc.value("gamma", 2.0);
  m.lambda = doc.value("lambda", 0.4);
  m.family = model::family_from_name(doc.value("family", "gamma"));
  m.conj_depth = doc.value("conj_depth", 1);
  if (doc.contains("ablate")) {
    for (const auto& a : doc.at("ablate")) {
      const std::string name = a.get<std::string>();
      if (name == "w") {
        m.ablations.use_weight = false;
      } else if (name == "b") {
        m.ablations.use_bias = false;
      } else if (name == "kl") {
        m.ablations.use_kl = false;
      } else if (name == "probe") {
        m.ablations.use_prob_embedding = false;
      } else {
        throw_usage("unknown ablation '" + name + "' (expected w, b, kl, probe)");
      }
    }
  }
  opt.cfg.adam.lr = doc.value("lr", 5e-4);
  opt.cfg.adam.weight_decay = doc.value("weight_decay", 1e-8);
  opt.cfg.batch_size = doc.value("batch", 512);
  opt.cfg.max_epochs = doc.value("epochs", 100);
  opt.cfg.patience = doc.value("patience", 10);
  opt.cfg.init_seed = rng::derive(opt.seed, 1);
  opt.cfg.data_seed = rng::derive(opt.seed, 2);
  return opt;
}

json run_config_json(const json& options, const TrainOptions& opt,
                     const data::SplitDataset& ds) {
  json rc = options;
  rc["resolved"] = {
      {"model", json::parse(train::model_config_to_json(opt.cfg.model))},
      {"lr", opt.cfg.adam.lr},
      {"weight_decay", opt.cfg.adam.weight_decay},
      {"batch", opt.cfg.batch_size},
      {"epochs", opt.cfg.max_epochs},
      {"patience", opt.cfg.patience},
      {"seed", opt.seed},
      {"init_seed", hex64(opt.cfg.init_seed)},
      {"data_seed", hex64(opt.cfg.data_seed)},
      {"dataset_hash", hex64(ds.file_hash)},
      {"vocab", ds.vocab()},
      {"users", ds.users.size()},
  };
  return rc;
}

// ---------------------------------------------------------------------------
// explanation records

json explanation_to_json(const eval::Explanation& ex,
                         const data::SplitDataset* ds, const std::string& user) {
  auto name_of = [ds](int id) -> json {
    if (ds == nullptr || id == 0) return json(nullptr);
    return ds->item_name(id);
  };
  json levels = json::array();
  for (const auto& level : ex.levels) {
    json rows = json::array();
    for (const auto& ps : level) {
      json names = json::array();
      for (int item : ps.items) names.push_back(name_of(item));
      rows.push_back({{"level", ps.level},
                      {"start", ps.start},
                      {"items", ps.items},
                      {"item_names", names},
                      {"distance", ps.distance},
                      {"weight", ps.weight},
                      {"bias", ps.bias},
                      {"contribution", ps.contribution}});
    }
    levels.push_back(std::move(rows));
  }
  json importance = json::array();
  for (const auto& [item, value] : ex.item_importance) {
    importance.push_back(
        {{"item", item}, {"name", name_of(item)}, {"importance", value}});
  }
  json doc = {{"target", ex.target},
              {"target_name", name_of(ex.target)},
              {"score", ex.score},
              {"importance_mode",
               ex.mode == eval::ImportanceMode::Aggregated ? "aggregated" : "point"},
              {"levels", levels},
              {"item_importance", importance}};
  if (!user.empty()) doc["user"] = user;
  return doc;
}

struct LoadedModel {
  train::Checkpoint ckpt;
  model::ModelParams params;

  explicit LoadedModel(const std::string& path)
      : ckpt(train::load_checkpoint(path)),
        params(model::ModelParams::from_store(ckpt.config, ckpt.vocab,
                                              ckpt.params)) {}
};

void check_dataset_hash(const train::Checkpoint& ckpt,
                        const data::SplitDataset& ds) {
  if (ckpt.dataset_hash != 0 && ds.file_hash != 0 &&
      ckpt.dataset_hash != ds.file_hash) {
    throw_usage("checkpoint/dataset mismatch: checkpoint was trained on bundle "
                "hash " + hex64(ckpt.dataset_hash) + " but this bundle hashes to " +
                hex64(ds.file_hash));
  }
}

}  // namespace

extern "C" {

const char* ptsr_version(void) { return kVersion; }

const char* ptsr_last_error(void) { return g_last_error.c_str(); }

void ptsr_string_free(char* s) { std::free(s); }

ptsr_status ptsr_prepare(const char* options_json, char** report_out) {
  return guarded([&] {
    const json options = parse_options(options_json);
    const std::string input = options.at("input").get<std::string>();
    const std::string output = options.at("output").get<std::string>();
    if (!fs::exists(input)) {
      throw_usage("prepare: input file does not exist: " + input);
    }
    data::TextFormat fmt = data::TextFormat::named(options.value("format", "tsv"));
    if (options.contains("user_col")) fmt.user_col = options.at("user_col");
    if (options.contains("item_col")) fmt.item_col = options.at("item_col");
    if (options.contains("time_col")) fmt.time_col = options.at("time_col");
    const int max_len = options.value("max_len", 20);
    const int negatives = options.value("negatives", 100);
    const std::uint64_t seed = options.value("seed", 42ull);

    const auto log = data::ingest(input, fmt);
    const auto filtered = data::five_core_filter(log);
    data::SplitDataset ds = data::split(filtered, max_len);
    data::build_eval_candidates(ds, negatives, seed);

    json rc = options;
    rc["resolved"] = {{"max_len", max_len},
                      {"negatives", negatives},
                      {"seed", seed},
                      {"users", ds.users.size()},
                      {"items", ds.items.size()},
                      {"interactions", filtered.records.size()}};
    ds.run_config = rc.dump();
    data::save_bundle(ds, output);

    emit(report_out, json{{"users", ds.users.size()},
                          {"items", ds.items.size()},
                          {"interactions", filtered.records.size()},
                          {"output", output},
                          {"run_config", rc}});
  });
}

ptsr_status ptsr_synth(const char* options_json, char** report_out) {
  return guarded([&] {
    const json options = parse_options(options_json);
    json config_doc;
    if (options.contains("config_inline")) {
      config_doc = options.at("config_inline");
    } else {
      const std::string path = options.at("config").get<std::string>();
      if (!fs::exists(path)) {
        throw_usage("synth: config file does not exist: " + path);
      }
      std::ifstream in(path, std::ios::binary);
      try {
        config_doc = json::parse(in);
      } catch (const json::exception& e) {
        throw_usage("synth: bad config json: " + std::string(e.what()));
      }
    }
    const synth::SynthConfig cfg = synth_config_from_json(config_doc);
    const std::string out_dir = options.at("out_dir").get<std::string>();
    ensure_dir(out_dir);

    const synth::SynthOutput out = synth::generate(cfg);
    const std::string log_path = out_dir + "/interactions.tsv";
    const std::string key_path = out_dir + "/key_patterns.tsv";
    const std::string cfg_path = out_dir + "/synth_config.json";
    synth::write_log(out.log, log_path);
    synth::write_key_map(out.key_map, cfg, key_path);
    write_text(cfg_path, synth_config_to_json(cfg).dump(2) + "\n");

    emit(report_out, json{{"users", cfg.users},
                          {"interactions", out.log.records.size()},
                          {"rules", cfg.rules.size()},
                          {"fired", out.key_map.size()},
                          {"log", log_path},
                          {"key_map", key_path},
                          {"config", cfg_path}});
  });
}

ptsr_status ptsr_train(const char* options_json, ptsr_log_callback log_cb,
                       void* user_data, char** report_out) {
  return guarded([&] {
    const json options = parse_options(options_json);
    const std::string data_path = options.at("data").get<std::string>();
    data::SplitDataset ds = data::load_bundle(data_path);
    TrainOptions opt = train_options_from_json(options, ds.max_len);
    opt.cfg.model.validate();

    train::Checkpoint resume;
    const bool resuming = !opt.resume_path.empty();
    if (resuming) {
      resume = train::load_checkpoint(opt.resume_path);
      check_dataset_hash(resume, ds);
    }

    const json rc = run_config_json(options, opt, ds);
    const std::string rc_text = rc.dump();

    std::ofstream log_file;
    if (!opt.out_dir.empty()) {
      ensure_dir(opt.out_dir);
      log_file.open(opt.out_dir + "/train_log.jsonl",
                    std::ios::binary | (resuming ? std::ios::app : std::ios::trunc));
      if (!log_file) {
        throw Error(ErrorKind::Io, "cannot write " + opt.out_dir + "/train_log.jsonl");
      }
    }

    const auto on_epoch = [&](const train::EpochRecord& rec) {
      const json line = {{"epoch", rec.epoch},
                         {"loss", rec.train_loss},
                         {"valid_ndcg10", rec.valid_ndcg10}};
      const std::string text = line.dump();
      if (log_file.is_open()) log_file << text << '\n' << std::flush;
      if (log_cb != nullptr) log_cb(text.c_str(), user_data);
    };

    const train::FitResult fit = train::fit(opt.cfg, ds, rc_text, on_epoch,
                                            resuming ? &resume : nullptr);

    std::string ckpt_path, last_path;
    if (!opt.out_dir.empty()) {
      ckpt_path = opt.out_dir + "/checkpoint.ptsr";
      last_path = opt.out_dir + "/checkpoint_last.ptsr";
      train::save_checkpoint(fit.best, ckpt_path);
      train::save_checkpoint(fit.last, last_path);
      write_text(opt.out_dir + "/run_config.json", rc_text + "\n");
    }

    double best_metric = 0.0;
    int best_epoch = 0;
    for (const auto& rec : fit.history) {
      if (rec.valid_ndcg10 > best_metric) {
        best_metric = rec.valid_ndcg10;
        best_epoch = rec.epoch;
      }
    }
    emit(report_out, json{{"epochs_run", fit.history.size()},
                          {"best_epoch", best_epoch},
                          {"best_valid_ndcg10", best_metric},
                          {"checkpoint", ckpt_path},
                          {"checkpoint_last", last_path},
                          {"run_config", rc}});
  });
}

ptsr_status ptsr_evaluate(const char* options_json, char** report_out) {
  return guarded([&] {
    const json options = parse_options(options_json);
    LoadedModel lm(options.at("checkpoint").get<std::string>());
    const data::SplitDataset ds =
        data::load_bundle(options.at("data").get<std::string>());
    check_dataset_hash(lm.ckpt, ds);

    std::vector<int> ks = options.value("k", std::vector<int>{5, 10});
    const std::string split_name = options.value("split", "test");
    const eval::Split split =
        split_name == "valid" ? eval::Split::Valid : eval::Split::Test;

    const eval::EvalSummary summary =
        eval::evaluate(lm.params, lm.ckpt.config, ds, split, ks);

    json metrics = json::object();
    for (int k : ks) {
      metrics["hr@" + std::to_string(k)] = summary.hr.at(k);
      metrics["ndcg@" + std::to_string(k)] = summary.ndcg.at(k);
    }
    json report = {
        {"split", split_name},
        {"users", summary.users},
        {"metrics", metrics},
        {"config_hash", hex64(data::fnv1a({lm.ckpt.run_config_json.data(),
                                           lm.ckpt.run_config_json.size()}))},
        {"init_seed", hex64(lm.ckpt.init_seed)},
        {"data_seed", hex64(lm.ckpt.data_seed)},
        {"run_config",
         lm.ckpt.run_config_json.empty() ? json(nullptr)
                                         : json::parse(lm.ckpt.run_config_json)}};
    if (options.contains("out")) {
      write_text(options.at("out").get<std::string>(), report.dump(2) + "\n");
    }
    emit(report_out, report);
  });
}

ptsr_status ptsr_explain(const char* options_json, char** report_out) {
  return guarded([&] {
    const json options = parse_options(options_json);
    LoadedModel lm(options.at("checkpoint").get<std::string>());
    const data::SplitDataset ds =
        data::load_bundle(options.at("data").get<std::string>());
    check_dataset_hash(lm.ckpt, ds);

    const eval::ImportanceMode mode =
        options.value("importance", "aggregated") == "point"
            ? eval::ImportanceMode::PointOnly
            : eval::ImportanceMode::Aggregated;

    std::vector<int> user_rows;
    if (options.contains("users")) {
      for (const auto& name : options.at("users")) {
        const int u = ds.user_index(name.get<std::string>());
        if (u < 0) throw_usage("explain: unknown user " + name.get<std::string>());
        user_rows.push_back(u);
      }
    } else {
      for (std::size_t u = 0; u < ds.users.size(); ++u) {
        user_rows.push_back(static_cast<int>(u));
      }
    }

    const model::Scorer scorer(lm.params, lm.ckpt.config);
    std::ostringstream records;
    const json header = {
        {"record", "header"},
        {"config_hash", hex64(data::fnv1a({lm.ckpt.run_config_json.data(),
                                           lm.ckpt.run_config_json.size()}))},
        {"run_config",
         lm.ckpt.run_config_json.empty() ? json(nullptr)
                                         : json::parse(lm.ckpt.run_config_json)}};
    records << header.dump() << '\n';
    for (int u : user_rows) {
      const auto input = ds.test_input(u);
      const auto ctx = scorer.context(input);
      const eval::Explanation ex =
          eval::explain(scorer, ctx, ds.users[u].test, mode);
      records << explanation_to_json(ex, &ds, ds.users[u].name).dump() << '\n';
    }
    if (options.contains("out")) {
      write_text(options.at("out").get<std::string>(), records.str());
    }

    json report = {{"users_explained", user_rows.size()},
                   {"importance_mode",
                    mode == eval::ImportanceMode::Aggregated ? "aggregated" : "point"},
                   {"config_hash",
                    hex64(data::fnv1a({lm.ckpt.run_config_json.data(),
                                       lm.ckpt.run_config_json.size()}))}};
    if (options.contains("out")) report["out"] = options.at("out");

    if (options.contains("relations")) {
      const auto relations =
          eval::load_relations(options.at("relations").get<std::string>(), ds);
      const std::vector<int> default_ks = {1, 2, 3, 5};
      std::vector<int> ks = options.value("recall_k", default_ks);
      json recall = json::object();
      for (int k : ks) {
        const auto rep = eval::key_item_recall(scorer, ds, relations, k, mode);
        json per_relation = json::object();
        for (const auto& [rel, value] : rep.recall) {
          per_relation[rel] = {{"recall", value}, {"pairs", rep.pairs.at(rel)}};
        }
        recall["@" + std::to_string(k)] = {{"per_relation", per_relation},
                                           {"skipped", rep.skipped}};
      }
      report["key_item_recall"] = recall;
    }
    emit(report_out, report);
  });
}

// ---------------------------------------------------------------------------
// opaque handles

struct ptsr_model {
  LoadedModel loaded;
  model::Scorer scorer;

  explicit ptsr_model(const std::string& path)
      : loaded(path), scorer(loaded.params, loaded.ckpt.config) {}
};

struct ptsr_dataset {
  data::SplitDataset ds;
};

ptsr_status ptsr_model_open(const char* checkpoint_path, ptsr_model** out) {
  return guarded([&] {
    if (checkpoint_path == nullptr || out == nullptr) {
      throw_usage("model_open: null argument");
    }
    *out = new ptsr_model(checkpoint_path);
  });
}

void ptsr_model_close(ptsr_model* model) { delete model; }

ptsr_status ptsr_model_score(const ptsr_model* model, const int32_t* items,
                             size_t n_items, int32_t candidate,
                             double* score_out) {
  return guarded([&] {
    if (model == nullptr || items == nullptr || score_out == nullptr) {
      throw_usage("model_score: null argument");
    }
    std::vector<int> seq(items, items + n_items);
    const auto ctx = model->scorer.context(seq);
    *score_out = model->scorer.score(ctx, candidate);
  });
}

ptsr_status ptsr_model_explain(const ptsr_model* model, const int32_t* items,
                               size_t n_items, int32_t target,
                               char** explanation_json_out) {
  return guarded([&] {
    if (model == nullptr || items == nullptr || explanation_json_out == nullptr) {
      throw_usage("model_explain: null argument");
    }
    std::vector<int> seq(items, items + n_items);
    const auto ctx = model->scorer.context(seq);
    const eval::Explanation ex = eval::explain(model->scorer, ctx, target);
    *explanation_json_out =
        dup_string(explanation_to_json(ex, nullptr, "").dump());
  });
}

ptsr_status ptsr_dataset_open(const char* bundle_path, ptsr_dataset** out) {
  return guarded([&] {
    if (bundle_path == nullptr || out == nullptr) {
      throw_usage("dataset_open: null argument");
    }
    auto* handle = new ptsr_dataset();
    try {
      handle->ds = data::load_bundle(bundle_path);
    } catch (...) {
      delete handle;
      throw;
    }
    *out = handle;
  });
}

void ptsr_dataset_close(ptsr_dataset* dataset) { delete dataset; }

ptsr_status ptsr_dataset_summary(const ptsr_dataset* dataset, char** json_out) {
  return guarded([&] {
    if (dataset == nullptr || json_out == nullptr) {
      throw_usage("dataset_summary: null argument");
    }
    std::size_t interactions = 0;
    for (const auto& u : dataset->ds.users) interactions += u.history.size();
    emit(json_out, json{{"users", dataset->ds.users.size()},
                        {"items", dataset->ds.items.size()},
                        {"interactions", interactions},
                        {"max_len", dataset->ds.max_len},
                        {"negatives_per_user", dataset->ds.negatives_per_user},
                        {"hash", hex64(dataset->ds.file_hash)}});
  });
}

}  // extern "C"
