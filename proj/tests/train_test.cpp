#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "ptsr/data.hpp"
#include "ptsr/errors.hpp"
#include "ptsr/eval.hpp"
#include "ptsr/specfn.hpp"
#include "ptsr/synth.hpp"
#include "ptsr/train.hpp"

using namespace ptsr;
namespace fs = std::filesystem;

namespace {

// A small planted-rule dataset shared by the training tests.
data::SplitDataset small_synth_dataset(std::uint64_t seed = 7) {
  synth::SynthConfig cfg;
  cfg.vocab = 50;
  cfg.users = 300;
  cfg.len_min = 10;
  cfg.len_max = 14;
  cfg.noise = 0.2;
  cfg.seed = seed;
  cfg.rules = synth::SynthConfig::random_rules(4, 6, 0.9, cfg.vocab, seed);
  const auto out = synth::generate(cfg);
  const auto filtered = data::five_core_filter(out.log);
  auto ds = data::split(filtered, 12);
  data::build_eval_candidates(ds, 20, seed + 1);
  return ds;
}

train::TrainConfig small_train_config(const data::SplitDataset& ds) {
  train::TrainConfig cfg;
  cfg.model.d = 8;
  cfg.model.levels = 2;
  cfg.model.max_len = ds.max_len;
  cfg.model.gamma = 2.0;
  cfg.model.lambda = 0.4;
  cfg.adam.lr = 2e-3;
  cfg.adam.weight_decay = 1e-8;
  cfg.batch_size = 64;
  cfg.max_epochs = 4;
  cfg.patience = 10;
  cfg.init_seed = 11;
  cfg.data_seed = 13;
  return cfg;
}

bool params_bitwise_equal(const diff::ParamStore& a, const diff::ParamStore& b) {
  if (a.count() != b.count()) return false;
  for (int s = 0; s < a.count(); ++s) {
    if (!a.value(s).same_shape(b.value(s))) return false;
    if (std::memcmp(a.value(s).data.data(), b.value(s).data.data(),
                    a.value(s).data.size() * sizeof(double)) != 0) {
      return false;
    }
  }
  return true;
}

std::string temp_path(const std::string& name) {
  return (fs::temp_directory_path() /
          ("ptsr_train_" + std::to_string(::getpid()) + "_" + name))
      .string();
}

}  // namespace

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  diff::ParamStore store;
  store.add("x", diff::Tensor(2, 2, 1.5));
  auto state = train::OptimizerState::zeros_like(store);
  auto grads = diff::GradientMap::zeros_like(store);
  train::AdamConfig cfg;
  cfg.weight_decay = 0.0;
  train::adam_step(store, grads, state, cfg);
  for (double v : store.value(0).data) CHECK(v == 1.5);
}

TEST_CASE("adam: first bias-corrected step moves by about lr") {
  diff::ParamStore store;
  store.add("x", diff::Tensor::scalar(0.7));
  auto state = train::OptimizerState::zeros_like(store);
  auto grads = diff::GradientMap::zeros_like(store);
  grads.grads[0].data[0] = 1.0;
  train::AdamConfig cfg;
  cfg.lr = 0.001;
  cfg.weight_decay = 0.0;
  train::adam_step(store, grads, state, cfg);
  // m-hat = 1, v-hat = 1 at t = 1, so the update is lr/(1 + eps)
  CHECK(store.value(0).data[0] == doctest::Approx(0.7 - 0.001).epsilon(1e-7));
  CHECK(state.step == 1);
}

TEST_CASE("adam: decay-only step scales parameters") {
  diff::ParamStore store;
  store.add("x", diff::Tensor::scalar(2.0));
  auto state = train::OptimizerState::zeros_like(store);
  auto grads = diff::GradientMap::zeros_like(store);
  train::AdamConfig cfg;
  cfg.lr = 0.01;
  cfg.weight_decay = 0.1;
  train::adam_step(store, grads, state, cfg);
  CHECK(store.value(0).data[0] == doctest::Approx(2.0 * 0.999).epsilon(1e-12));
}

TEST_CASE("adam rejects non-finite gradients naming the parameter") {
  diff::ParamStore store;
  store.add("embedding_table", diff::Tensor(2, 2, 1.0));
  auto state = train::OptimizerState::zeros_like(store);
  auto grads = diff::GradientMap::zeros_like(store);
  grads.grads[0].data[3] = std::nan("");
  train::AdamConfig cfg;
  try {
    train::adam_step(store, grads, state, cfg);
    FAIL("expected a numeric error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Numeric);
    CHECK(std::string(e.what()).find("embedding_table") != std::string::npos);
  }
}

TEST_CASE("train_epoch is deterministic and the loss decreases over epochs") {
  const auto ds = small_synth_dataset();
  const auto cfg = small_train_config(ds);

  auto run = [&](int epochs) {
    auto params = model::ModelParams::init(cfg.model, ds.vocab(), cfg.init_seed);
    auto opt = train::OptimizerState::zeros_like(params.store);
    std::vector<double> losses;
    for (int e = 1; e <= epochs; ++e) {
      losses.push_back(train::train_epoch(params, cfg.model, ds, opt, cfg.adam,
                                          cfg.batch_size, cfg.data_seed, e));
    }
    return std::make_pair(losses, std::move(params));
  };

  auto [losses_a, params_a] = run(5);
  auto [losses_b, params_b] = run(5);
  CHECK(losses_a == losses_b);  // bit-identical trajectories
  CHECK(params_bitwise_equal(params_a.store, params_b.store));
  CHECK(losses_a[4] < losses_a[0]);
}

TEST_CASE("untrained epoch loss sits at the diffuse-initialization level") {
  // At initialization every embedding is near softplus(0.5), so all pattern
  // distances are close to 0 and both scores sit near c = L(1+lambda)gamma;
  // the pairwise objective is then softplus(c) + softplus(-c). The loss
  // starts high and the optimizer first pushes the negative scores down.
  const auto ds = small_synth_dataset();
  auto cfg = small_train_config(ds);
  cfg.adam.lr = 0.0;  // probe the untouched model
  auto params = model::ModelParams::init(cfg.model, ds.vocab(), cfg.init_seed);
  auto opt = train::OptimizerState::zeros_like(params.store);
  const double loss = train::train_epoch(params, cfg.model, ds, opt, cfg.adam,
                                         cfg.batch_size, cfg.data_seed, 1);
  const double c = cfg.model.levels * (1.0 + cfg.model.lambda) * cfg.model.gamma;
  const double predicted = specfn::softplus(c) + specfn::softplus(-c);
  CHECK(std::abs(loss - predicted) < 0.75);
}

TEST_CASE("30 epochs on the separable dataset reach the frozen loss level") {
  // oracle run of this exact recipe: epoch-30 mean loss 0.8966
  const auto ds = small_synth_dataset();
  auto cfg = small_train_config(ds);
  cfg.batch_size = 16;
  auto params = model::ModelParams::init(cfg.model, ds.vocab(), cfg.init_seed);
  auto opt = train::OptimizerState::zeros_like(params.store);
  double first = 0.0, last = 0.0;
  for (int e = 1; e <= 30; ++e) {
    last = train::train_epoch(params, cfg.model, ds, opt, cfg.adam,
                              cfg.batch_size, cfg.data_seed, e);
    if (e == 1) first = last;
  }
  CHECK(last < 1.1);
  CHECK(last < 0.25 * first);
}

TEST_CASE("gradient flow: embedding rows touched by a batch move") {
  const auto ds = small_synth_dataset();
  auto cfg = small_train_config(ds);
  auto params = model::ModelParams::init(cfg.model, ds.vocab(), cfg.init_seed);
  const auto before = params.store.value(params.table);
  auto opt = train::OptimizerState::zeros_like(params.store);

  data::BatchStream stream(ds, 1 << 20, cfg.data_seed);  // one giant batch
  const auto batches = stream.epoch(1);
  REQUIRE(batches.size() == 1);
  const auto& batch = batches[0];

  diff::GradientMap gmap = diff::GradientMap::zeros_like(params.store);
  std::set<int> touched;
  for (int r = 0; r < batch.rows; ++r) {
    diff::Tape tape(&params.store);
    const auto graph =
        model::build_sequence_graph(tape, params, cfg.model, batch.row(r));
    const auto pos =
        model::score_node(tape, params, cfg.model, graph, batch.positives[r]);
    const auto neg =
        model::score_node(tape, params, cfg.model, graph, batch.negatives[r]);
    tape.backward_accumulate(model::loss_node(tape, pos, neg),
                             1.0 / batch.rows, gmap);
    for (int id : batch.row(r)) {
      if (id != 0) touched.insert(id);
    }
    touched.insert(batch.positives[r]);
    touched.insert(batch.negatives[r]);
  }
  train::adam_step(params.store, gmap, opt, cfg.adam);

  const auto& after = params.store.value(params.table);
  int moved = 0;
  for (int id : touched) {
    bool row_moved = false;
    for (int c = 0; c < before.cols; ++c) {
      if (after.at(id, c) != before.at(id, c)) {
        row_moved = true;
        break;
      }
    }
    if (row_moved) ++moved;
  }
  CHECK(static_cast<double>(moved) >= 0.99 * static_cast<double>(touched.size()));
}

TEST_CASE("fit stops after two epochs with patience 1 and lr 0") {
  const auto ds = small_synth_dataset();
  auto cfg = small_train_config(ds);
  cfg.adam.lr = 0.0;
  cfg.patience = 1;
  cfg.max_epochs = 50;
  const auto result = train::fit(cfg, ds, "{}");
  CHECK(result.history.size() == 2);
}

TEST_CASE("fit returns the checkpoint with the best validation metric") {
  const auto ds = small_synth_dataset();
  auto cfg = small_train_config(ds);
  cfg.max_epochs = 4;
  const auto result = train::fit(cfg, ds, "{}");
  double best = -1.0;
  int best_epoch = 0;
  for (const auto& rec : result.history) {
    if (rec.valid_ndcg10 > best) {
      best = rec.valid_ndcg10;
      best_epoch = rec.epoch;
    }
  }
  CHECK(result.best.epoch == best_epoch);
  for (const auto& rec : result.history) {
    CHECK(result.history[best_epoch - 1].valid_ndcg10 >= rec.valid_ndcg10);
  }
}

TEST_CASE("checkpoint round-trip is lossless and byte-identical") {
  const auto ds = small_synth_dataset();
  auto cfg = small_train_config(ds);
  cfg.max_epochs = 1;
  const auto result = train::fit(cfg, ds, "{\"run\":\"test\"}");

  const std::string p1 = temp_path("ckpt1.ptsr");
  const std::string p2 = temp_path("ckpt2.ptsr");
  train::save_checkpoint(result.last, p1);
  const auto loaded = train::load_checkpoint(p1);
  CHECK(params_bitwise_equal(loaded.params, result.last.params));
  CHECK(loaded.epoch == result.last.epoch);
  CHECK(loaded.run_config_json == result.last.run_config_json);
  CHECK(loaded.opt.step == result.last.opt.step);
  CHECK(loaded.dataset_hash == result.last.dataset_hash);
  train::save_checkpoint(loaded, p2);

  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  const std::string b1((std::istreambuf_iterator<char>(f1)),
                       std::istreambuf_iterator<char>());
  const std::string b2((std::istreambuf_iterator<char>(f2)),
                       std::istreambuf_iterator<char>());
  CHECK(b1 == b2);

  // corrupt one payload byte: checksum failure, not a silent misload
  std::string corrupted = b1;
  corrupted[corrupted.size() / 2] ^= 0x01;
  const std::string p3 = temp_path("ckpt3.ptsr");
  std::ofstream(p3, std::ios::binary) << corrupted;
  try {
    train::load_checkpoint(p3);
    FAIL("expected a checksum error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("checksum") != std::string::npos);
  }

  // bump the version field: explicit incompatibility
  std::string bumped = b1;
  bumped[8] = 99;
  const std::string p4 = temp_path("ckpt4.ptsr");
  std::ofstream(p4, std::ios::binary) << bumped;
  try {
    train::load_checkpoint(p4);
    FAIL("expected a version error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Usage);
    CHECK(std::string(e.what()).find("version") != std::string::npos);
  }

  for (const auto& p : {p1, p2, p3, p4}) std::remove(p.c_str());
}

TEST_CASE("resume reproduces the uninterrupted trajectory") {
  const auto ds = small_synth_dataset();
  auto cfg = small_train_config(ds);
  cfg.max_epochs = 5;
  cfg.patience = 50;
  const auto full = train::fit(cfg, ds, "{}");

  auto cfg3 = cfg;
  cfg3.max_epochs = 3;
  const auto first = train::fit(cfg3, ds, "{}");
  const std::string path = temp_path("resume.ptsr");
  train::save_checkpoint(first.last, path);
  const auto middle = train::load_checkpoint(path);
  const auto continued = train::fit(cfg, ds, "{}", nullptr, &middle);
  std::remove(path.c_str());

  REQUIRE(continued.history.size() == full.history.size());
  for (std::size_t i = 0; i < full.history.size(); ++i) {
    CHECK(continued.history[i].epoch == full.history[i].epoch);
    CHECK(continued.history[i].train_loss == full.history[i].train_loss);
    CHECK(continued.history[i].valid_ndcg10 == full.history[i].valid_ndcg10);
  }
  CHECK(params_bitwise_equal(continued.last.params, full.last.params));
}

TEST_CASE("non-finite loss raises a numeric error") {
  const auto ds = small_synth_dataset();
  auto cfg = small_train_config(ds);
  cfg.adam.lr = 1e300;  // exploding step overflows the attention scores
  cfg.max_epochs = 3;
  CHECK_THROWS_AS(train::fit(cfg, ds, "{}"), Error);
}

TEST_CASE("model config json round-trip") {
  model::ModelConfig cfg;
  cfg.d = 12;
  cfg.levels = 3;
  cfg.max_len = 17;
  cfg.gamma = 1.25;
  cfg.lambda = 0.75;
  cfg.family = model::Family::Beta;
  cfg.ablations.use_weight = false;
  cfg.ablations.use_kl = false;
  const auto text = train::model_config_to_json(cfg);
  const auto back = train::model_config_from_json(text);
  CHECK(back.d == cfg.d);
  CHECK(back.levels == cfg.levels);
  CHECK(back.max_len == cfg.max_len);
  CHECK(back.gamma == cfg.gamma);
  CHECK(back.lambda == cfg.lambda);
  CHECK(back.family == cfg.family);
  CHECK(back.ablations.use_weight == cfg.ablations.use_weight);
  CHECK(back.ablations.use_kl == cfg.ablations.use_kl);
  CHECK(back.ablations.use_bias == cfg.ablations.use_bias);
}
