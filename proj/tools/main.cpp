// ptsr command line: dataset preparation, training, evaluation, explanation
// export and synthetic data generation, all through the C API.

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ptsr.h"

namespace {

using nlohmann::json;

int finish(ptsr_status status, char* report, bool print_report) {
  if (status != PTSR_OK) {
    std::fprintf(stderr, "error: %s\n", ptsr_last_error());
    return static_cast<int>(status);
  }
  if (report != nullptr) {
    if (print_report) std::printf("%s\n", report);
    ptsr_string_free(report);
  }
  return 0;
}

void stream_log_line(const char* record_json, void*) {
  std::printf("%s\n", record_json);
  std::fflush(stdout);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ptsr: pattern-based transparent sequential recommendation"};
  app.require_subcommand(1);

  // prepare ------------------------------------------------------------
  auto* prepare = app.add_subcommand(
      "prepare", "Ingest an interaction log into a dataset bundle");
  std::string in_path, in_format = "tsv", out_path;
  std::string user_col = "user", item_col = "item", time_col = "timestamp";
  int max_len = 20, negatives = 100;
  std::uint64_t prep_seed = 42;
  prepare->add_option("--input", in_path, "Interaction log")->required();
  prepare->add_option("--format", in_format, "tsv | csv | amazon");
  prepare->add_option("--output", out_path, "Bundle file to write")->required();
  prepare->add_option("--max-len", max_len, "Maximum sequence length");
  prepare->add_option("--negatives", negatives, "Evaluation negatives per user");
  prepare->add_option("--seed", prep_seed, "Candidate sampling seed");
  prepare->add_option("--user-col", user_col, "User column name");
  prepare->add_option("--item-col", item_col, "Item column name");
  prepare->add_option("--time-col", time_col, "Timestamp column name");

  // train --------------------------------------------------------------
  auto* train = app.add_subcommand("train", "Train a model on a bundle");
  std::string data_path, out_dir, family = "gamma", resume_path;
  int d = 64, levels = 2, batch = 512, epochs = 100, patience = 10,
      conj_depth = 1;
  double gamma = 2.0, lambda = 0.4, lr = 5e-4, weight_decay = 1e-8;
  std::uint64_t train_seed = 42;
  std::vector<std::string> ablate;
  train->add_option("--data", data_path, "Dataset bundle")->required();
  train->add_option("--out", out_dir, "Output directory")->required();
  train->add_option("--d", d, "Embedding width per parameter");
  train->add_option("--levels", levels, "Maximum pattern level");
  train->add_option("--gamma", gamma, "Score margin");
  train->add_option("--lambda", lambda,
                    "Bias strength (0.4 sits in the peak region)");
  train->add_option("--family", family, "gamma | beta");
  train->add_option("--lr", lr, "Learning rate");
  train->add_option("--weight-decay", weight_decay, "Decoupled weight decay");
  train->add_option("--batch", batch, "Batch size");
  train->add_option("--epochs", epochs, "Maximum epochs");
  train->add_option("--patience", patience, "Early stopping patience");
  train->add_option("--seed", train_seed, "Master seed");
  train->add_option("--conj-depth", conj_depth, "Conjunction scorer depth");
  train->add_option("--ablate", ablate, "Disable components: w b kl probe");
  train->add_option("--resume", resume_path, "Checkpoint to resume from");

  // evaluate -----------------------------------------------------------
  auto* evaluate = app.add_subcommand("evaluate", "Ranking metrics on a bundle");
  std::string eval_ckpt, eval_data, eval_out, eval_split = "test";
  std::vector<int> ks = {5, 10};
  evaluate->add_option("--checkpoint", eval_ckpt, "Checkpoint")->required();
  evaluate->add_option("--data", eval_data, "Dataset bundle")->required();
  evaluate->add_option("--k", ks, "Cutoffs");
  evaluate->add_option("--split", eval_split, "test | valid");
  evaluate->add_option("--out", eval_out, "Report file");

  // explain ------------------------------------------------------------
  auto* explain = app.add_subcommand(
      "explain", "Per-pattern explanations and key-item recall");
  std::string ex_ckpt, ex_data, ex_out, ex_relations, importance = "aggregated";
  std::vector<std::string> ex_users;
  std::vector<int> recall_ks = {1, 2, 3, 5};
  explain->add_option("--checkpoint", ex_ckpt, "Checkpoint")->required();
  explain->add_option("--data", ex_data, "Dataset bundle")->required();
  explain->add_option("--user", ex_users, "Users to explain (default: all)");
  explain->add_option("--relations", ex_relations,
                      "Relation file: user, target, related, type");
  explain->add_option("--recall-k", recall_ks, "Recall cutoffs");
  explain->add_option("--importance", importance, "aggregated | point");
  explain->add_option("--out", ex_out, "Explanation records (json lines)");

  // synth ----------------------------------------------------------------
  auto* synth = app.add_subcommand("synth",
                                   "Generate a planted-rule interaction log");
  std::string synth_config, synth_out;
  synth->add_option("--config", synth_config, "Synth config json")->required();
  synth->add_option("--out", synth_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? 0 : 2;
  }

  if (prepare->parsed()) {
    const json options = {{"input", in_path},     {"format", in_format},
                          {"output", out_path},   {"max_len", max_len},
                          {"negatives", negatives}, {"seed", prep_seed},
                          {"user_col", user_col}, {"item_col", item_col},
                          {"time_col", time_col}};
    char* report = nullptr;
    const ptsr_status status = ptsr_prepare(options.dump().c_str(), &report);
    return finish(status, report, true);
  }

  if (train->parsed()) {
    json options = {{"data", data_path},   {"out_dir", out_dir},
                    {"d", d},              {"levels", levels},
                    {"gamma", gamma},      {"lambda", lambda},
                    {"family", family},    {"lr", lr},
                    {"weight_decay", weight_decay},
                    {"batch", batch},      {"epochs", epochs},
                    {"patience", patience}, {"seed", train_seed},
                    {"conj_depth", conj_depth}};
    if (!ablate.empty()) options["ablate"] = ablate;
    if (!resume_path.empty()) options["resume"] = resume_path;
    char* report = nullptr;
    const ptsr_status status =
        ptsr_train(options.dump().c_str(), stream_log_line, nullptr, &report);
    return finish(status, report, true);
  }

  if (evaluate->parsed()) {
    json options = {{"checkpoint", eval_ckpt},
                    {"data", eval_data},
                    {"k", ks},
                    {"split", eval_split}};
    if (!eval_out.empty()) options["out"] = eval_out;
    char* report = nullptr;
    const ptsr_status status = ptsr_evaluate(options.dump().c_str(), &report);
    return finish(status, report, true);
  }

  if (explain->parsed()) {
    json options = {{"checkpoint", ex_ckpt},
                    {"data", ex_data},
                    {"importance", importance},
                    {"recall_k", recall_ks}};
    if (!ex_users.empty()) options["users"] = ex_users;
    if (!ex_relations.empty()) options["relations"] = ex_relations;
    if (!ex_out.empty()) options["out"] = ex_out;
    char* report = nullptr;
    const ptsr_status status = ptsr_explain(options.dump().c_str(), &report);
    return finish(status, report, true);
  }

  if (synth->parsed()) {
    const json options = {{"config", synth_config}, {"out_dir", synth_out}};
    char* report = nullptr;
    const ptsr_status status = ptsr_synth(options.dump().c_str(), &report);
    return finish(status, report, true);
  }

  return 2;
}
