#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "tg/augment.hpp"
#include "tg/dataset.hpp"
#include "tg/models.hpp"

namespace tg {

struct StagePlan {
  Index clip_len = 16;
  bool shift_enabled = true;
  int epochs = 60;
  OptimConfig optim{};
  AugmentConfig augment{};
  /// Leave the stage early once validation accuracy reaches this value.
  std::optional<double> promotion_threshold;
};

struct TrainPlan {
  std::vector<StagePlan> stages;
  int eval_every = 1;
  Index batch_size = 16;
  std::string checkpoint_dir;  // empty: keep everything in memory
  std::uint64_t seed = 42;

  void validate(const ModelConfig& model) const;
};

struct EpochMetrics {
  int epoch = 0;  // global, counted across stages
  int stage = 0;
  int stage_epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double val_acc = 0.0;  // NaN when not evaluated
};

/// "epoch <e> lr <v> loss <v> val_acc <v>"
std::string format_metrics_line(const EpochMetrics& m);

struct TrainOptions {
  /// Continue from a checkpoint written by an earlier run of the same plan.
  std::string resume_from;
  /// Human-readable progress, one line per epoch.
  std::ostream* progress = nullptr;
  /// Stop after this many epochs in this call (for tests of resumption); -1 = no limit.
  int max_epochs_this_call = -1;
};

struct TrainResult {
  std::vector<std::string> metrics_lines;
  std::vector<double> stage_final_accuracy;  // last validation accuracy per stage
  Checkpoint final_checkpoint;
  bool finished = false;
  bool already_finished = false;  // resume of a completed run
};

/// Runs every stage. Writes "<dir>/metrics.log", "<dir>/epoch_NNNN.ckpt" at
/// each evaluation, "<dir>/stage_N.ckpt" at stage ends and "<dir>/final.ckpt".
TrainResult train(const TrainPlan& plan, const ModelConfig& model_config, const Dataset& dataset,
                  const TrainOptions& options = {});

/// One optimiser step on a ready batch; returns the loss. Throws
/// NumericalError on a non-finite loss.
double train_step(Model& model, const Tensor& batch, const std::vector<int>& labels, const OptimConfig& optim,
                  int stage_epoch);

/// Validation accuracy used during training: centre window, centre crop, one clip.
double validation_accuracy(Model& model, const Dataset& dataset, const AugmentConfig& eval_config,
                           std::uint64_t seed);

/// Rebuilds a model from a checkpoint written by train and puts it in the
/// stage (clip length, shift) it was last trained in.
std::unique_ptr<Model> load_trained_model(const std::string& checkpoint_path);
std::unique_ptr<Model> load_trained_model(const Checkpoint& ckpt);

}  // namespace tg
