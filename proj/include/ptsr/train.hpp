#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ptsr/data.hpp"
#include "ptsr/diff.hpp"
#include "ptsr/model.hpp"

namespace ptsr::train {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled: theta -= lr * wd * theta
};

struct OptimizerState {
  std::int64_t step = 0;
  std::vector<diff::Tensor> m, v;  // aligned with ParamStore slots

  static OptimizerState zeros_like(const diff::ParamStore& store);
};

// One Adam update with bias correction; weight decay is applied to the
// parameters before the moment update. Non-finite gradients raise a numeric
// error naming the parameter.
void adam_step(diff::ParamStore& params, const diff::GradientMap& grads,
               OptimizerState& state, const AdamConfig& cfg);

struct TrainConfig {
  model::ModelConfig model;
  AdamConfig adam;
  int batch_size = 512;
  int max_epochs = 100;
  int patience = 10;
  std::uint64_t init_seed = 1;
  std::uint64_t data_seed = 2;
};

// One pass over the epoch's shuffled batches; the per-batch loss is the
// batch mean of the pairwise objective. Returns the epoch mean loss.
double train_epoch(model::ModelParams& params, const model::ModelConfig& cfg,
                   const data::SplitDataset& ds, OptimizerState& opt,
                   const AdamConfig& adam, int batch_size,
                   std::uint64_t data_seed, int epoch_index);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double valid_ndcg10 = 0.0;
};

struct Checkpoint {
  std::uint32_t format_version = kCheckpointVersion;
  std::string run_config_json;  // persisted verbatim into every artifact
  model::ModelConfig config;
  int vocab = 0;
  diff::ParamStore params;
  OptimizerState opt;
  std::uint64_t init_seed = 0;
  std::uint64_t data_seed = 0;
  int epoch = 0;
  std::vector<EpochRecord> history;
  std::uint64_t dataset_hash = 0;
};

struct FitResult {
  Checkpoint best;  // highest validation NDCG@10
  Checkpoint last;  // state after the final epoch, for resuming
  std::vector<EpochRecord> history;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Early stopping: stop after `patience` epochs without a strict validation
// NDCG@10 improvement. `resume` continues an interrupted run from its
// recorded epoch with identical subsequent trajectory.
FitResult fit(const TrainConfig& cfg, const data::SplitDataset& ds,
              const std::string& run_config_json,
              const EpochCallback& on_epoch = nullptr,
              const Checkpoint* resume = nullptr);

// Versioned, checksummed binary container; save -> load -> save is
// byte-identical.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

std::string model_config_to_json(const model::ModelConfig& cfg);
model::ModelConfig model_config_from_json(const std::string& text);

std::uint32_t crc32(std::span<const unsigned char> bytes);

}  // namespace ptsr::train
