#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "tg/augment.hpp"
#include "tg/dataset.hpp"
#include "tg/evaluate.hpp"
#include "tg/models.hpp"
#include "tg/train.hpp"

namespace tg {

/// Flat "key = value" configuration covering the model, the training plan,
/// augmentation, synthetic data and evaluation. Unknown keys are errors.
///
/// Stages default to the model's clip_len with shift on and train.epochs
/// epochs, using the top-level optim.* and augment.* values; any of these can
/// be overridden per stage with "stage.<i>.<key>".
struct RunConfig {
  std::uint64_t seed = 42;
  int threads = 1;
  ModelConfig model{};
  Index batch_size = 16;
  int eval_every = 1;
  int num_stages = 1;
  int epochs = 60;
  OptimConfig optim{};
  AugmentConfig augment{};
  SyntheticSpec synthetic{};
  std::string eval_variant = "center-crop";
  int eval_stride = 1;
  Index eval_clips = 10;
  SamplePolicy eval_policy = SamplePolicy::random;

  /// Per-stage overrides in file order: stage index -> (key suffix, value).
  std::map<int, std::vector<std::pair<std::string, std::string>>> stage_overrides;

  static RunConfig parse(const std::string& text, const std::string& origin = "<config>");
  static RunConfig load(const std::string& path);

  /// Sets one key; throws ShapeError for unknown keys or bad values.
  void set(const std::string& key, const std::string& value);

  /// Stages with every override applied. Augment seeds are filled in by train.
  std::vector<StagePlan> stages() const;
  TrainPlan plan(const std::string& checkpoint_dir) const;
  /// Synthetic spec with its seed derived from the run seed.
  SyntheticSpec synthetic_spec() const;

  void validate() const;

  /// Every key with its resolved value, stages expanded. Parsing the result
  /// gives back an equivalent configuration.
  std::string to_text() const;
};

}  // namespace tg
