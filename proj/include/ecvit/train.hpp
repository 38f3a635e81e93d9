#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "ecvit/checkpoint.hpp"
#include "ecvit/data.hpp"
#include "ecvit/model.hpp"
#include "ecvit/optim.hpp"

namespace ecvit {

struct TrainOptions {
  ModelConfig config;
  std::int64_t epochs = 30;
  std::int64_t batch = 64;
  double lr = 0.01;
  double weight_decay = 0.05;
  std::uint64_t seed = 0;
  bool warmup = true;
  bool augment = true;
  /// > 0: train on the first N training images without augmentation and
  /// validate (eval mode) on the same images. Only the final checkpoint is
  /// written.
  std::int64_t overfit = 0;
  double clip_grad = 0;  // global-norm clip when > 0
  /// Stop after this many completed epochs without changing the schedule.
  std::int64_t stop_after = 0;
  std::filesystem::path out_dir;  // metrics.csv, last.ckpt, best.ckpt; empty writes nothing
  std::filesystem::path resume;   // checkpoint to continue from
  std::function<void(const std::string&)> log;
};

struct EpochMetrics {
  std::int64_t epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double train_acc = 0;
  double val_loss = 0;
  double val_acc = 0;
  double wall_seconds = 0;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  std::vector<double> step_losses;  // this run only
  std::int64_t steps = 0;           // global step count at exit
};

struct EvalResult {
  double loss = 0;
  double accuracy = 0;
  std::int64_t correct = 0;
  std::int64_t count = 0;
  std::int64_t classes = 0;
  std::vector<float> logits;  // count x classes, dataset order
  std::vector<std::int64_t> labels;
};

TrainResult train(const TrainOptions& opts, const Dataset& train_set, const Dataset& val_set);

/// Loads CIFAR-10 or CIFAR-100 (by num_classes) from data_dir and trains.
/// Subset sizes of 0 use the full splits.
TrainResult train_from_dir(const TrainOptions& opts, const std::filesystem::path& data_dir,
                           std::int64_t train_subset = 0, std::int64_t val_subset = 0);

/// Eval-mode forward over the whole dataset in order.
EvalResult evaluate(ModelParams<float>& model, const Dataset& data, std::int64_t batch);

/// Parameters and buffers only.
Checkpoint model_checkpoint(const ModelParams<float>& model);

/// Rebuilds a model from a checkpoint; every parameter and buffer must be
/// present with the expected shape and nothing else may be.
ModelParams<float> model_from_checkpoint(const Checkpoint& c);

/// Throws CheckpointError(kConfigConflict) naming every field where
/// `requested` differs from the checkpoint's config.
void require_matching_config(const ModelConfig& checkpoint_cfg, const ModelConfig& requested);

std::string metrics_csv(const std::vector<EpochMetrics>& history);

CifarVariant variant_for(const ModelConfig& cfg);

}  // namespace ecvit
