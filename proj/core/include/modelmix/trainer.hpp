#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "modelmix/augment.hpp"
#include "modelmix/losses.hpp"
#include "modelmix/metrics.hpp"
#include "modelmix/mixer.hpp"
#include "modelmix/synthtasks.hpp"
#include "modelmix/unet.hpp"

namespace modelmix {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool operator==(const AdamOptions&) const = default;
};

/// Adam over a deduplicated parameter list (aliased Vars are updated once).
class Adam {
 public:
  Adam(const std::vector<Var<float>>& params, double lr, AdamOptions opts = {});

  /// Missing gradients count as zero.
  void step();
  void zero_grad();
  std::size_t step_count() const { return t_; }
  std::size_t parameter_count() const { return params_.size(); }

 private:
  std::vector<Var<float>> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_;
  AdamOptions opts_;
  std::size_t t_ = 0;
};

struct TrainConfig {
  /// Dataset directories (i, j). Exactly one pair is supported.
  std::vector<std::pair<std::string, std::string>> task_pairs;
  /// num_classes is taken from each dataset.
  UNetConfig unet;
  BetaParams beta_lambda;
  BetaParams beta_alpha;
  double lr = 1e-3;
  std::size_t batch_size = 8;
  std::size_t epochs = 200;
  std::uint64_t seed = 0;
  int variant = 4;
  bool stop_gradient_targets = false;
  CutoutSpec cutout;
  AdamOptions optimizer;
  LossWeights loss_weights;
  std::size_t mixed_layers = 1;
  bool augment = true;
  /// When nonzero, every batch draws this many items from the labeled pool and the rest
  /// from the unlabeled pool, both cycling.
  std::size_t labeled_per_batch = 0;
  /// Validate (and checkpoint) every this many epochs; the last epoch always is.
  std::size_t eval_every = 1;

  void validate() const;
};

/// Relative dataset paths are resolved against `base_dir`. Unknown keys are rejected.
TrainConfig config_from_json(const std::string& text, const std::filesystem::path& base_dir = {});
std::string config_to_json(const TrainConfig& cfg);
TrainConfig load_config(const std::filesystem::path& path);

struct StepResult {
  LossBreakdown breakdown;
  std::array<double, 2> alpha{};             // per task
  std::array<std::optional<MixPlan>, 2> mix; // direction i->j, then j->i
  std::array<std::size_t, 2> annotated{};    // scribble pixels seen per task
};

/// Per-task batch handed to a step. Items must come from the task's train split.
using Batch = std::vector<const DatasetItem*>;

/// Per-task batch stream. Without a labeled quota the items are drawn in
/// shuffled passes; the task that defines the epoch length reshuffles at every
/// epoch start and gets a short final batch, any other task cycles. With a
/// quota, each batch takes `labeled_per_batch` labeled items and fills up with
/// unlabeled ones, both pools cycling independently.
class BatchSampler {
 public:
  BatchSampler(const Batch& pool, std::size_t batch_size, std::size_t labeled_per_batch, std::size_t epoch_items);
  void begin_epoch(SeededRng& rng);
  /// Batch for step `step` (counted within the epoch).
  Batch next(std::size_t step, SeededRng& rng);
  std::size_t steps_per_epoch() const { return (epoch_items_ + batch_size_ - 1) / batch_size_; }

 private:
  struct Stream {
    Batch pool;
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
    std::size_t quota = 0;
  };
  static void reshuffle(Stream& st, SeededRng& rng);

  std::vector<Stream> streams_;
  std::size_t batch_size_;
  std::size_t epoch_items_;
  bool defines_epoch_;
};

/// Owns the two task models and the optimizer for one task pair.
class ModelMixTrainer {
 public:
  ModelMixTrainer(const TrainConfig& cfg, const TaskDataset& task_i, const TaskDataset& task_j);

  /// One optimizer update on both models from one batch per task.
  StepResult train_step(const Batch& batch_i, const Batch& batch_j, SeededRng& rng);

  const SegModel<float>& model(std::size_t t) const { return models_.at(t); }
  SegModel<float>& model(std::size_t t) { return models_.at(t); }
  const VariantSpec& variant() const { return spec_; }
  const TrainConfig& config() const { return cfg_; }

  /// Replaces sampled lambdas; used to probe degenerate mixes.
  std::optional<double> forced_lambda;

 private:
  TrainConfig cfg_;
  VariantSpec spec_;
  std::vector<SegModel<float>> models_;
  std::optional<Adam> adam_;
};

struct StepRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  LossBreakdown loss;
  std::array<double, 2> lambda{};  // NaN when no mix was built
  std::array<std::string, 2> layer;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::array<double, 2> val_mean_dice{};
  std::array<double, 2> val_mean_hd{};
  std::array<std::vector<double>, 2> val_class_dice;
};

struct TrainHistory {
  std::array<std::string, 2> tasks;
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  std::array<double, 2> best_val_dice{-1.0, -1.0};
  std::array<std::size_t, 2> best_epoch{};
  std::vector<std::string> warnings;
  double wall_clock_seconds = 0.0;

  /// Deterministic part only (no wall clock).
  std::string steps_csv() const;
  std::string to_json() const;
};

struct TrainResult {
  TrainHistory history;
  /// Best-validation snapshots of each task model.
  std::vector<SegModel<float>> best_models;
  std::vector<std::filesystem::path> checkpoints;
};

using EpochCallback = std::function<void(const EpochRecord&, const TrainHistory&)>;

/// Trains on in-memory datasets. With a non-empty out_dir, writes
/// checkpoints/<task>.mmck (best validation mean Dice), history.json and steps.csv.
TrainResult train(const TrainConfig& cfg, const TaskDataset& task_i, const TaskDataset& task_j,
                  const std::filesystem::path& out_dir = {}, const EpochCallback& on_epoch = {});
/// Reads the datasets named by cfg.task_pairs.
TrainResult train(const TrainConfig& cfg, const std::filesystem::path& out_dir, const EpochCallback& on_epoch = {});

struct AblationRun {
  int variant = 0;
  std::uint64_t seed = 0;
  std::array<MetricReport, 2> test;
  /// Mean of the two tasks' foreground mean Dice.
  double mean_dice = 0.0;
  double wall_clock_seconds = 0.0;
};

struct AblationTable {
  std::array<std::string, 2> tasks;
  std::array<int, 2> num_classes{};
  std::vector<AblationRun> runs;

  /// Seed mean of AblationRun::mean_dice for a variant.
  double variant_mean_dice(int variant) const;
  std::vector<int> variants() const;
  /// One row per variant: per task and foreground class, mean and std Dice over
  /// all test items of all seeds, then the task average, then the overall average.
  std::string to_csv() const;
  /// variant, seed, task, mean_dice, mean_hd per run.
  std::string runs_csv() const;
};

using RunCallback = std::function<void(const AblationRun&)>;

/// Trains and tests every (variant, seed). With a non-empty out_dir each run
/// writes into out_dir/v<variant>_s<seed>/ and the table goes to ablation.csv.
AblationTable run_ablation(const TrainConfig& base, const TaskDataset& task_i, const TaskDataset& task_j,
                           const std::vector<int>& variants, const std::vector<std::uint64_t>& seeds,
                           const std::filesystem::path& out_dir = {}, const RunCallback& on_run = {},
                           const EpochCallback& on_epoch = {});

}  // namespace modelmix
