#include "ptsr/train.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "ptsr/errors.hpp"
#include "ptsr/eval.hpp"

namespace ptsr::train {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'P', 'T', 'S', 'R', 'C', 'K', 'P', '\0'};

std::string hex64(std::uint64_t v) {
  std::ostringstream ss;
  ss << std::hex << v;
  return ss.str();
}

std::uint64_t from_hex64(const std::string& s) {
  return std::stoull(s, nullptr, 16);
}

void append_u32(std::string& out, std::uint32_t v) {
  char buf[4];
  std::memcpy(buf, &v, 4);
  out.append(buf, 4);
}

void append_u64(std::string& out, std::uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}

}  // namespace

std::uint32_t crc32(std::span<const unsigned char> bytes) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) {
        c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : (c >> 1);
      }
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t crc = 0xFFFFFFFFu;
  for (unsigned char b : bytes) {
    crc = table[(crc ^ b) & 0xFFu] ^ (crc >> 8);
  }
  return crc ^ 0xFFFFFFFFu;
}

OptimizerState OptimizerState::zeros_like(const diff::ParamStore& store) {
  OptimizerState s;
  s.m.reserve(store.count());
  s.v.reserve(store.count());
  for (int i = 0; i < store.count(); ++i) {
    const auto& t = store.value(i);
    s.m.emplace_back(t.rows, t.cols);
    s.v.emplace_back(t.rows, t.cols);
  }
  return s;
}

void adam_step(diff::ParamStore& params, const diff::GradientMap& grads,
               OptimizerState& state, const AdamConfig& cfg) {
  if (grads.grads.size() != static_cast<std::size_t>(params.count()) ||
      state.m.size() != grads.grads.size()) {
    throw_usage("adam_step: shapes do not match the parameter store");
  }
  for (int slot = 0; slot < params.count(); ++slot) {
    for (double g : grads.grads[slot].data) {
      if (!std::isfinite(g)) {
        throw_numeric("adam_step: non-finite gradient for parameter " +
                      params.name(slot));
      }
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (int slot = 0; slot < params.count(); ++slot) {
    auto& theta = params.value(slot).data;
    auto& m = state.m[slot].data;
    auto& v = state.v[slot].data;
    const auto& g = grads.grads[slot].data;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      if (cfg.weight_decay != 0.0) {
        theta[i] -= cfg.lr * cfg.weight_decay * theta[i];
      }
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mh = m[i] / bc1;
      const double vh = v[i] / bc2;
      theta[i] -= cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
    }
  }
}

double train_epoch(model::ModelParams& params, const model::ModelConfig& cfg,
                   const data::SplitDataset& ds, OptimizerState& opt,
                   const AdamConfig& adam, int batch_size,
                   std::uint64_t data_seed, int epoch_index) {
  data::BatchStream stream(ds, batch_size, data_seed);
  const auto batches = stream.epoch(epoch_index);
  diff::GradientMap gmap = diff::GradientMap::zeros_like(params.store);

  double total = 0.0;
  std::int64_t count = 0;
  for (const auto& batch : batches) {
    gmap.zero();
    const double scale = 1.0 / static_cast<double>(batch.rows);
    for (int r = 0; r < batch.rows; ++r) {
      diff::Tape tape(&params.store);
      const auto graph =
          model::build_sequence_graph(tape, params, cfg, batch.row(r));
      const auto pos = model::score_node(tape, params, cfg, graph, batch.positives[r]);
      const auto neg = model::score_node(tape, params, cfg, graph, batch.negatives[r]);
      const auto l = model::loss_node(tape, pos, neg);
      const double lval = tape.scalar_value(l);
      if (!std::isfinite(lval)) {
        throw_numeric("train_epoch: non-finite loss at epoch " +
                      std::to_string(epoch_index));
      }
      tape.backward_accumulate(l, scale, gmap);
      total += lval;
      ++count;
    }
    adam_step(params.store, gmap, opt, adam);
  }
  return total / static_cast<double>(count);
}

namespace {

Checkpoint snapshot(const TrainConfig& cfg, const model::ModelParams& params,
                    const OptimizerState& opt, int epoch,
                    const std::vector<EpochRecord>& history,
                    const std::string& run_config_json,
                    std::uint64_t dataset_hash) {
  Checkpoint c;
  c.run_config_json = run_config_json;
  c.config = cfg.model;
  c.vocab = params.vocab;
  c.params = params.store;
  c.opt = opt;
  c.init_seed = cfg.init_seed;
  c.data_seed = cfg.data_seed;
  c.epoch = epoch;
  c.history = history;
  c.dataset_hash = dataset_hash;
  return c;
}

}  // namespace

FitResult fit(const TrainConfig& cfg, const data::SplitDataset& ds,
              const std::string& run_config_json, const EpochCallback& on_epoch,
              const Checkpoint* resume) {
  cfg.model.validate();
  if (cfg.model.max_len != ds.max_len) {
    throw_usage("fit: model max_len does not match the dataset bundle");
  }
  if (cfg.max_epochs < 1) throw_usage("fit: max_epochs must be >= 1");
  if (cfg.patience < 1) throw_usage("fit: patience must be >= 1");

  model::ModelParams params =
      resume ? model::ModelParams::from_store(cfg.model, resume->vocab,
                                              resume->params)
             : model::ModelParams::init(cfg.model, ds.vocab(), cfg.init_seed);
  if (params.vocab != ds.vocab()) {
    throw_usage("fit: checkpoint vocabulary does not match the dataset");
  }
  OptimizerState opt =
      resume ? resume->opt : OptimizerState::zeros_like(params.store);
  std::vector<EpochRecord> history = resume ? resume->history
                                            : std::vector<EpochRecord>{};
  int start_epoch = resume ? resume->epoch : 0;

  // Recover the early-stopping state from the recorded history.
  double best_metric = -1.0;
  int best_epoch = 0;
  int stale = 0;
  for (const auto& rec : history) {
    if (rec.valid_ndcg10 > best_metric) {
      best_metric = rec.valid_ndcg10;
      best_epoch = rec.epoch;
      stale = 0;
    } else {
      ++stale;
    }
  }

  FitResult result;
  bool have_best = false;

  for (int epoch = start_epoch + 1; epoch <= cfg.max_epochs; ++epoch) {
    const double loss = train_epoch(params, cfg.model, ds, opt, cfg.adam,
                                    cfg.batch_size, cfg.data_seed, epoch);
    const int k10[] = {10};
    const auto summary = eval::evaluate(params, cfg.model, ds,
                                        eval::Split::Valid, k10);
    EpochRecord rec{epoch, loss, summary.ndcg.at(10)};
    history.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (rec.valid_ndcg10 > best_metric) {
      best_metric = rec.valid_ndcg10;
      best_epoch = epoch;
      stale = 0;
      result.best = snapshot(cfg, params, opt, epoch, history,
                             run_config_json, ds.file_hash);
      have_best = true;
    } else {
      ++stale;
    }
    if (stale >= cfg.patience) break;
  }

  result.last = snapshot(cfg, params, opt,
                         history.empty() ? start_epoch : history.back().epoch,
                         history, run_config_json, ds.file_hash);
  if (!have_best) {
    // Resumed without improving on the recorded best: the latest state is
    // the only parameter snapshot available.
    result.best = result.last;
    result.best.epoch = best_epoch == 0 ? result.last.epoch : best_epoch;
  }
  result.history = std::move(history);
  return result;
}

// ---------------------------------------------------------------------------
// checkpoint serialization

std::string model_config_to_json(const model::ModelConfig& cfg) {
  const json doc = {
      {"d", cfg.d},
      {"levels", cfg.levels},
      {"max_len", cfg.max_len},
      {"gamma", cfg.gamma},
      {"lambda", cfg.lambda},
      {"family", model::family_name(cfg.family)},
      {"conj_depth", cfg.conj_depth},
      {"ablations",
       {{"use_weight", cfg.ablations.use_weight},
        {"use_bias", cfg.ablations.use_bias},
        {"use_kl", cfg.ablations.use_kl},
        {"use_prob_embedding", cfg.ablations.use_prob_embedding}}},
  };
  return doc.dump();
}

model::ModelConfig model_config_from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw_usage(std::string("model config: bad json: ") + e.what());
  }
  model::ModelConfig cfg;
  try {
    cfg.d = doc.at("d").get<int>();
    cfg.levels = doc.at("levels").get<int>();
    cfg.max_len = doc.at("max_len").get<int>();
    cfg.gamma = doc.at("gamma").get<double>();
    cfg.lambda = doc.at("lambda").get<double>();
    cfg.family = model::family_from_name(doc.at("family").get<std::string>());
    cfg.conj_depth = doc.value("conj_depth", 1);
    const auto& ab = doc.at("ablations");
    cfg.ablations.use_weight = ab.at("use_weight").get<bool>();
    cfg.ablations.use_bias = ab.at("use_bias").get<bool>();
    cfg.ablations.use_kl = ab.at("use_kl").get<bool>();
    cfg.ablations.use_prob_embedding = ab.at("use_prob_embedding").get<bool>();
  } catch (const json::exception& e) {
    throw_usage(std::string("model config: missing field: ") + e.what());
  }
  return cfg;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  json slots = json::array();
  for (int s = 0; s < ckpt.params.count(); ++s) {
    const auto& t = ckpt.params.value(s);
    slots.push_back({{"name", ckpt.params.name(s)},
                     {"rows", t.rows},
                     {"cols", t.cols}});
  }
  json hist = json::array();
  for (const auto& rec : ckpt.history) {
    hist.push_back({{"epoch", rec.epoch},
                    {"train_loss", rec.train_loss},
                    {"valid_ndcg10", rec.valid_ndcg10}});
  }
  const json header = {
      {"run_config", ckpt.run_config_json},
      {"model", json::parse(model_config_to_json(ckpt.config))},
      {"vocab", ckpt.vocab},
      {"init_seed", hex64(ckpt.init_seed)},
      {"data_seed", hex64(ckpt.data_seed)},
      {"epoch", ckpt.epoch},
      {"dataset_hash", hex64(ckpt.dataset_hash)},
      {"opt_step", ckpt.opt.step},
      {"slots", slots},
      {"history", hist},
  };
  const std::string header_text = header.dump();

  std::string body;
  body.append(kMagic, sizeof(kMagic));
  append_u32(body, ckpt.format_version);
  append_u64(body, header_text.size());
  body += header_text;
  auto append_tensors = [&body](const std::vector<diff::Tensor>& ts) {
    for (const auto& t : ts) {
      body.append(reinterpret_cast<const char*>(t.data.data()),
                  t.data.size() * sizeof(double));
    }
  };
  std::vector<diff::Tensor> param_tensors;
  for (int s = 0; s < ckpt.params.count(); ++s) {
    param_tensors.push_back(ckpt.params.value(s));
  }
  append_tensors(param_tensors);
  append_tensors(ckpt.opt.m);
  append_tensors(ckpt.opt.v);

  const std::uint32_t crc = crc32(
      {reinterpret_cast<const unsigned char*>(body.data()) + sizeof(kMagic),
       body.size() - sizeof(kMagic)});
  append_u32(body, crc);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "save_checkpoint: cannot write " + path);
  out.write(body.data(), static_cast<std::streamsize>(body.size()));
  if (!out) throw Error(ErrorKind::Io, "save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "load_checkpoint: cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string body = buf.str();

  const std::size_t min_size = sizeof(kMagic) + 4 + 8 + 4;
  if (body.size() < min_size ||
      std::memcmp(body.data(), kMagic, sizeof(kMagic)) != 0) {
    throw Error(ErrorKind::Io, "load_checkpoint: " + path + " is not a checkpoint");
  }
  std::uint32_t version = 0;
  std::memcpy(&version, body.data() + sizeof(kMagic), 4);
  if (version != kCheckpointVersion) {
    throw_usage("load_checkpoint: incompatible format version " +
                std::to_string(version) + " (expected " +
                std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint32_t stored_crc =
      [&body] {
        std::uint32_t c = 0;
        std::memcpy(&c, body.data() + body.size() - 4, 4);
        return c;
      }();
  const std::uint32_t actual_crc = crc32(
      {reinterpret_cast<const unsigned char*>(body.data()) + sizeof(kMagic),
       body.size() - sizeof(kMagic) - 4});
  if (stored_crc != actual_crc) {
    throw Error(ErrorKind::Io, "load_checkpoint: checksum mismatch in " + path);
  }

  std::uint64_t header_len = 0;
  std::memcpy(&header_len, body.data() + sizeof(kMagic) + 4, 8);
  std::size_t offset = sizeof(kMagic) + 4 + 8;
  if (offset + header_len + 4 > body.size()) {
    throw Error(ErrorKind::Io, "load_checkpoint: truncated header in " + path);
  }
  json header;
  try {
    header = json::parse(body.substr(offset, header_len));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Io, "load_checkpoint: bad header: " + std::string(e.what()));
  }
  offset += header_len;

  Checkpoint ckpt;
  ckpt.format_version = version;
  try {
    ckpt.run_config_json = header.at("run_config").get<std::string>();
    ckpt.config = model_config_from_json(header.at("model").dump());
    ckpt.vocab = header.at("vocab").get<int>();
    ckpt.init_seed = from_hex64(header.at("init_seed").get<std::string>());
    ckpt.data_seed = from_hex64(header.at("data_seed").get<std::string>());
    ckpt.epoch = header.at("epoch").get<int>();
    ckpt.dataset_hash = from_hex64(header.at("dataset_hash").get<std::string>());
    ckpt.opt.step = header.at("opt_step").get<std::int64_t>();
    for (const auto& rec : header.at("history")) {
      ckpt.history.push_back({rec.at("epoch").get<int>(),
                              rec.at("train_loss").get<double>(),
                              rec.at("valid_ndcg10").get<double>()});
    }
    std::size_t payload = 0;
    std::vector<std::pair<std::string, std::pair<int, int>>> slot_meta;
    for (const auto& slot : header.at("slots")) {
      const int rows = slot.at("rows").get<int>();
      const int cols = slot.at("cols").get<int>();
      slot_meta.push_back({slot.at("name").get<std::string>(), {rows, cols}});
      payload += static_cast<std::size_t>(rows) * cols * sizeof(double) * 3;
    }
    if (offset + payload + 4 != body.size()) {
      throw Error(ErrorKind::Io, "load_checkpoint: truncated payload in " + path);
    }
    auto read_tensor = [&body, &offset](int rows, int cols) {
      diff::Tensor t(rows, cols);
      std::memcpy(t.data.data(), body.data() + offset,
                  t.data.size() * sizeof(double));
      offset += t.data.size() * sizeof(double);
      return t;
    };
    for (const auto& [name, shape] : slot_meta) {
      ckpt.params.add(name, read_tensor(shape.first, shape.second));
    }
    for (const auto& [name, shape] : slot_meta) {
      (void)name;
      ckpt.opt.m.push_back(read_tensor(shape.first, shape.second));
    }
    for (const auto& [name, shape] : slot_meta) {
      (void)name;
      ckpt.opt.v.push_back(read_tensor(shape.first, shape.second));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Io, "load_checkpoint: malformed header: " + std::string(e.what()));
  }
  return ckpt;
}

}  // namespace ptsr::train
