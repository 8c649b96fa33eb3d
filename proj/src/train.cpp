#include "tg/train.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "tg/evaluate.hpp"
#include "tg/ops.hpp"

namespace tg {

namespace {

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string join(const std::vector<std::string>& parts, char sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

std::vector<std::string> split_nonempty(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Everything needed to continue a run, carried in the checkpoint's extra map.
struct RunState {
  int stage = 0;
  int stage_epoch = 0;
  int global_epoch = 0;
  bool finished = false;
  double last_val = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> stage_acc;
  std::vector<std::string> history;
  Index clip_len = 0;  // stage the parameters were last trained in
  bool shift = true;

  std::map<std::string, std::string> to_extra() const {
    std::vector<std::string> acc;
    for (double a : stage_acc) acc.push_back(fmt17(a));
    return {{"stage", std::to_string(stage)},
            {"stage_epoch", std::to_string(stage_epoch)},
            {"global_epoch", std::to_string(global_epoch)},
            {"finished", finished ? "1" : "0"},
            {"last_val", fmt17(last_val)},
            {"stage_acc", join(acc, ',')},
            {"history", join(history, ';')},
            {"clip_len", std::to_string(clip_len)},
            {"shift", shift ? "1" : "0"}};
  }

  static RunState from_extra(const std::map<std::string, std::string>& extra) {
    auto get = [&](const char* k) {
      auto it = extra.find(k);
      if (it == extra.end()) throw ShapeError(std::string("checkpoint lacks training state '") + k + "'");
      return it->second;
    };
    RunState s;
    s.stage = std::stoi(get("stage"));
    s.stage_epoch = std::stoi(get("stage_epoch"));
    s.global_epoch = std::stoi(get("global_epoch"));
    s.finished = get("finished") == "1";
    s.last_val = std::strtod(get("last_val").c_str(), nullptr);
    for (const std::string& a : split_nonempty(get("stage_acc"), ',')) s.stage_acc.push_back(std::strtod(a.c_str(), nullptr));
    s.history = split_nonempty(get("history"), ';');
    s.clip_len = std::stoll(get("clip_len"));
    s.shift = get("shift") == "1";
    return s;
  }
};

std::string epoch_name(int e) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%04d.ckpt", e);
  return buf;
}

}  // namespace

void TrainPlan::validate(const ModelConfig& model) const {
  if (stages.empty()) throw ShapeError("train: plan has no stages");
  if (eval_every < 1) throw ShapeError("train: eval_every must be positive");
  if (batch_size < 1) throw ShapeError("train: batch_size must be positive");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const StagePlan& s = stages[i];
    const std::string where = "train: stage " + std::to_string(i) + ": ";
    if (s.epochs < 1) throw ShapeError(where + "epochs must be positive");
    if (s.clip_len < 1) throw ShapeError(where + "clip_len must be positive");
    if (s.promotion_threshold && !(*s.promotion_threshold >= 0.0 && *s.promotion_threshold <= 1.0)) {
      throw ShapeError(where + "promotion_threshold must lie in [0, 1]");
    }
    if (model.kind == ModelKind::slowfast && s.clip_len % model.alpha != 0) {
      throw ShapeError(where + "clip_len " + std::to_string(s.clip_len) + " not divisible by alpha");
    }
    s.optim.validate();
    s.augment.validate();
  }
}

std::string format_metrics_line(const EpochMetrics& m) {
  return "epoch " + std::to_string(m.epoch) + " lr " + fmt17(m.lr) + " loss " + fmt17(m.loss) + " val_acc " +
         fmt17(m.val_acc);
}

double train_step(Model& model, const Tensor& batch, const std::vector<int>& labels, const OptimConfig& optim,
                  int stage_epoch) {
  model.set_training(true);
  const Tensor logits = model.forward(batch);
  CrossEntropyResult ce = softmax_cross_entropy(logits, labels);
  const double loss = ce.loss.item();
  if (!std::isfinite(loss)) throw NumericalError("non-finite loss");
  ce.loss.backward();
  sgd_step(model.parameters(), optim, stage_epoch);
  return loss;
}

double validation_accuracy(Model& model, const Dataset& dataset, const AugmentConfig& eval_config,
                           std::uint64_t seed) {
  const auto val = validation_indices(dataset);
  if (val.empty()) return std::numeric_limits<double>::quiet_NaN();
  TTAVariant variant;
  variant.input_mode = model.config().input_mode;
  EvalOptions opts;
  opts.num_clips = 1;
  opts.policy = SamplePolicy::center;
  opts.seed = seed;
  opts.eval_config = eval_config;
  return evaluate(model, dataset, val, variant, opts).accuracy;
}

TrainResult train(const TrainPlan& plan, const ModelConfig& model_config, const Dataset& dataset,
                  const TrainOptions& options) {
  model_config.validate();
  plan.validate(model_config);
  if (model_config.num_classes != dataset.num_classes) {
    throw ShapeError("train: model has " + std::to_string(model_config.num_classes) + " classes, dataset has " +
                     std::to_string(dataset.num_classes));
  }
  if (model_config.in_channels != dataset.channels) {
    throw ShapeError("train: model expects " + std::to_string(model_config.in_channels) +
                     " input channels, dataset has " + std::to_string(dataset.channels));
  }
  const auto train_idx = train_indices(dataset);
  if (train_idx.empty()) throw ShapeError("train: training split is empty");

  auto model = build_model(model_config, derive_seed(plan.seed, "init"));
  RunState state;
  TrainResult result;
  if (!options.resume_from.empty()) {
    const Checkpoint ckpt = load_checkpoint(options.resume_from);
    restore_checkpoint(*model, ckpt);
    state = RunState::from_extra(ckpt.extra);
    if (state.finished) {
      result.metrics_lines = state.history;
      result.stage_final_accuracy = state.stage_acc;
      result.final_checkpoint = ckpt;
      result.finished = result.already_finished = true;
      return result;
    }
  }

  const std::filesystem::path dir = plan.checkpoint_dir;
  if (!dir.empty()) std::filesystem::create_directories(dir);
  auto save = [&](const std::string& name) {
    Checkpoint c = make_checkpoint(*model, state.global_epoch, plan.seed, state.to_extra());
    if (!dir.empty()) save_checkpoint(c, (dir / name).string());
    return c;
  };
  auto write_log = [&] {
    if (dir.empty()) return;
    std::ofstream os(dir / "metrics.log", std::ios::trunc);
    for (const std::string& l : state.history) os << l << '\n';
  };

  int epochs_run = 0;
  const Index n_train = static_cast<Index>(train_idx.size());
  while (state.stage < static_cast<int>(plan.stages.size())) {
    const StagePlan& stage = plan.stages[state.stage];
    model->set_stage(stage.clip_len, stage.shift_enabled);
    state.clip_len = stage.clip_len;
    state.shift = stage.shift_enabled;
    AugmentConfig aug = stage.augment;
    aug.seed = derive_seed(plan.seed, "augment", {static_cast<std::uint64_t>(state.stage)});
    const Index needed = frames_needed(stage.clip_len, model_config.input_mode);

    while (state.stage_epoch < stage.epochs) {
      if (options.max_epochs_this_call >= 0 && epochs_run >= options.max_epochs_this_call) {
        result.metrics_lines = state.history;
        result.stage_final_accuracy = state.stage_acc;
        result.final_checkpoint = make_checkpoint(*model, state.global_epoch, plan.seed, state.to_extra());
        return result;
      }
      std::vector<std::size_t> order = train_idx;
      Rng shuffle(derive_seed(plan.seed, "data", {static_cast<std::uint64_t>(state.global_epoch)}));
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

      double loss_sum = 0.0;
      for (Index b0 = 0, batch_no = 0; b0 < n_train; b0 += plan.batch_size, ++batch_no) {
        const Index b1 = std::min(n_train, b0 + plan.batch_size);
        std::vector<Tensor> inputs;
        std::vector<int> labels;
        for (Index j = b0; j < b1; ++j) {
          const VideoClip& clip = dataset.clips[order[j]];
          Tensor raw = training_sample(clip, needed, aug, state.global_epoch, static_cast<Index>(order[j]));
          inputs.push_back(to_model_input(raw, model_config.input_mode, dataset));
          labels.push_back(clip.label);
        }
        double loss;
        try {
          loss = train_step(*model, stack_clips(inputs), labels, stage.optim, state.stage_epoch);
        } catch (const NumericalError&) {
          throw NumericalError("non-finite loss at epoch " + std::to_string(state.global_epoch) + ", batch " +
                               std::to_string(batch_no));
        }
        loss_sum += loss * static_cast<double>(b1 - b0);
      }

      EpochMetrics m;
      m.epoch = state.global_epoch;
      m.stage = state.stage;
      m.stage_epoch = state.stage_epoch;
      m.lr = effective_lr(stage.optim, state.stage_epoch);
      m.loss = loss_sum / static_cast<double>(n_train);
      m.val_acc = std::numeric_limits<double>::quiet_NaN();
      const bool last = state.stage_epoch + 1 == stage.epochs;
      const bool evaluated = (state.stage_epoch + 1) % plan.eval_every == 0 || last;
      if (evaluated) {
        m.val_acc = validation_accuracy(*model, dataset, aug, derive_seed(plan.seed, "eval"));
        state.last_val = m.val_acc;
      }
      state.history.push_back(format_metrics_line(m));
      if (options.progress) {
        *options.progress << "stage " << m.stage << " " << state.history.back() << std::endl;
      }
      ++state.stage_epoch;
      ++state.global_epoch;
      ++epochs_run;
      const bool promoted = evaluated && stage.promotion_threshold && m.val_acc >= *stage.promotion_threshold;
      if (promoted || last) break;
      write_log();
      if (evaluated) save(epoch_name(m.epoch));
    }

    // stage boundary
    state.stage_acc.push_back(state.last_val);
    ++state.stage;
    state.stage_epoch = 0;
    state.finished = state.stage == static_cast<int>(plan.stages.size());
    write_log();
    save("stage_" + std::to_string(state.stage - 1) + ".ckpt");
    if (!dir.empty()) save(epoch_name(state.global_epoch - 1));
  }

  result.final_checkpoint = save("final.ckpt");
  result.metrics_lines = state.history;
  result.stage_final_accuracy = state.stage_acc;
  result.finished = true;
  return result;
}

std::unique_ptr<Model> load_trained_model(const Checkpoint& ckpt) {
  auto model = model_from_checkpoint(ckpt);
  auto it = ckpt.extra.find("clip_len");
  if (it != ckpt.extra.end()) {
    const Index clip_len = std::stoll(it->second);
    auto sh = ckpt.extra.find("shift");
    model->set_stage(clip_len, sh == ckpt.extra.end() || sh->second == "1");
  }
  return model;
}

std::unique_ptr<Model> load_trained_model(const std::string& checkpoint_path) {
  return load_trained_model(load_checkpoint(checkpoint_path));
}

}  // namespace tg
