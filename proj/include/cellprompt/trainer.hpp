// SPDX-License-Identifier: Apache-2.0
//
// Training schedule:
//   1. proxy pretraining of the encoder base (patch autoencoding on a
//      separately seeded synthetic set), after which the base is frozen;
//   2. prompt-generator training on BCE targets (skipped when no automatic
//      points are requested);
//   3. fine-tuning of the trainable set selected by the mode, with the
//      generator frozen unless joint training is requested.
// Every random choice is derived from TrainConfig::seed.
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cellprompt/checkpoint.hpp"
#include "cellprompt/datagen.hpp"
#include "cellprompt/losses.hpp"
#include "cellprompt/model.hpp"
#include "cellprompt/optim.hpp"
#include "cellprompt/prompt_selection.hpp"
#include "json.hpp"

namespace cellprompt {

enum class TrainMode { sac, sam_ft, frozen };
TrainMode parse_train_mode(const std::string& name);
std::string to_string(TrainMode mode);
TrainablePolicy encoder_policy(TrainMode mode);

enum class ExpertsAt { train, infer, both };
ExpertsAt parse_experts_at(const std::string& name);
std::string to_string(ExpertsAt where);

struct EarlyStopConfig {
  std::size_t min_epochs = 30;
  std::size_t patience = 10;
  std::size_t max_epochs = 100;

  void validate() const;
};

/// max(min_epochs, best_epoch + patience), epochs counted from 1.
std::size_t stopping_epoch(std::size_t best_epoch, const EarlyStopConfig& cfg);

/// Tracks the best epoch of a monitored value and decides when to stop.
class EarlyStopper {
 public:
  EarlyStopper(EarlyStopConfig cfg, bool higher_is_better) : cfg_(cfg), higher_(higher_is_better) {}

  /// Records epoch `epoch` (1-based); returns whether it is the new best.
  bool update(std::size_t epoch, double value);
  bool should_stop(std::size_t epoch) const;
  std::size_t best_epoch() const { return best_epoch_; }
  double best_value() const { return best_; }

 private:
  EarlyStopConfig cfg_;
  bool higher_;
  std::size_t best_epoch_ = 0;
  double best_ = 0.0;
};

struct PretrainConfig {
  std::size_t samples = 64;
  std::size_t steps = 200;
  std::size_t batch_size = 4;
  double lr = 2e-3;
};

struct GeneratorTrainConfig {
  EarlyStopConfig stop;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  std::size_t erosion_radius = 2;
};

struct TrainConfig {
  TrainMode mode = TrainMode::sac;
  std::size_t points = 3;
  std::size_t experts = 0;
  ExpertsAt experts_at = ExpertsAt::both;
  SelectionConfig selection;
  EarlyStopConfig stop;
  double lr = 1e-3;
  std::size_t batch_size = 8;
  OptimizerKind optimizer = OptimizerKind::adam;
  std::uint64_t seed = 0;
  LossConfig loss;
  bool joint = false;
  PretrainConfig pretrain;
  GeneratorTrainConfig generator;

  void validate() const;
};

nlohmann::ordered_json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct Dataset {
  std::vector<LabeledImage> train, val, test;
};
Dataset load_dataset(const std::string& root);

struct GeneratorEpoch {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct SacEpoch {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_dice = 0.0;
};

/// Comparison of every parameter before and after a training phase.
struct AuditReport {
  std::vector<std::string> changed;
  std::vector<std::string> trainable;
  bool frozen_unchanged = true;

  bool passed() const { return frozen_unchanged && changed == trainable; }
};

AuditReport audit_params(const std::vector<CheckpointTensor>& before, const NamedParams& after);

struct TrainResult {
  double pretrain_initial_loss = 0.0;
  double pretrain_final_loss = 0.0;
  std::vector<GeneratorEpoch> generator_log;
  std::vector<SacEpoch> log;
  std::size_t best_epoch = 0;
  double best_val_dice = 0.0;
  AuditReport audit;
};

using ProgressFn = std::function<void(const std::string&)>;

/// Trains the encoder base on patch reconstruction; adapters stay untouched.
/// Returns the mean loss of the first and last step.
std::pair<double, double> pretrain_encoder(ImageEncoder& encoder, const PretrainConfig& cfg, std::uint64_t seed);

/// BCE training of the prompt generator with early stopping on validation
/// loss; the best-validation parameters are kept.
std::vector<GeneratorEpoch> train_generator(PromptGenerator& generator, const std::vector<LabeledImage>& train,
                                            const std::vector<LabeledImage>& val, const GeneratorTrainConfig& cfg,
                                            std::uint64_t seed, const ProgressFn& progress = {});

/// Generator BCE targets for a ground-truth mask.
std::pair<Tensor, Tensor> generator_targets(const Tensor& gt_mask, std::size_t erosion_radius);

enum class PromptStage { train, infer };

/// Automatic prompts (if points > 0) followed by expert prompts (if enabled
/// for the stage). `map` may be null when points == 0.
PromptSet build_prompts(const ProbabilityMap* map, const Tensor& gt_mask, const TrainConfig& cfg, PromptStage stage,
                        std::uint64_t stream_seed);

/// Seed of the random-selection stream for one sample.
std::uint64_t prompt_seed(const TrainConfig& cfg, PromptStage stage, std::size_t epoch, std::size_t index);

/// Fine-tunes the trainable set of `model` and keeps the best-validation-Dice
/// parameters. Throws TrainingError on a non-finite loss.
TrainResult train_sac(SacModel& model, const Dataset& data, const TrainConfig& cfg, const ProgressFn& progress = {});

/// Pretraining, generator phase (when points > 0 or joint) and fine-tuning.
TrainResult train_pipeline(SacModel& model, const Dataset& data, const TrainConfig& cfg,
                           const ProgressFn& progress = {});

struct Evaluation {
  MetricReport mean;
  std::vector<MetricReport> per_image;
};

/// Per-image metrics with inference-stage prompts, averaged.
Evaluation evaluate(const SacModel& model, const std::vector<LabeledImage>& images, const TrainConfig& cfg);

}  // namespace cellprompt
