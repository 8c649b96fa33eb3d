#include "tg/evaluate.hpp"

#include "tg/ops.hpp"

namespace tg {

std::string to_string(TTAKind k) {
  switch (k) {
    case TTAKind::center_crop: return "center-crop";
    case TTAKind::horizontal_flip: return "horizontal-flip";
    case TTAKind::random_crop: return "random-crop";
    case TTAKind::reverse_order: return "reverse-order";
    case TTAKind::normal_reverse_concat: return "normal-reverse-concat";
  }
  return "?";
}

const std::vector<std::string>& tta_names() {
  static const std::vector<std::string> names{"center-crop", "horizontal-flip", "random-crop", "reverse-order",
                                              "normal-reverse-concat"};
  return names;
}

TTAKind parse_tta_kind(const std::string& s) {
  for (TTAKind k : {TTAKind::center_crop, TTAKind::horizontal_flip, TTAKind::random_crop,
                    TTAKind::reverse_order, TTAKind::normal_reverse_concat}) {
    if (to_string(k) == s) return k;
  }
  std::string valid;
  for (const std::string& n : tta_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw ShapeError("unknown variant '" + s + "'; valid names: " + valid);
}

Index variant_window_frames(const TTAVariant& variant, Index clip_len) {
  const Index needed = frames_needed(clip_len, variant.input_mode);
  return variant.kind == TTAKind::normal_reverse_concat ? (needed + 1) / 2 : needed;
}

Tensor variant_input(const Tensor& window, const TTAVariant& variant, Index clip_len,
                     const AugmentConfig& eval_config, const Dataset& stats, Rng& rng) {
  EvalView view;
  view.random_crop = variant.kind == TTAKind::random_crop;
  view.flip = variant.kind == TTAKind::horizontal_flip;
  Tensor x = eval_transform(window, eval_config, view, rng);
  if (variant.kind == TTAKind::reverse_order) x = reverse_clip(x);
  if (variant.kind == TTAKind::normal_reverse_concat) {
    x = gather_window(concat_normal_reverse(x), 0, frames_needed(clip_len, variant.input_mode), 1);
  }
  return to_model_input(x, variant.input_mode, stats);
}

EvalResult evaluate(Model& model, const Dataset& dataset, const std::vector<std::size_t>& videos,
                    const TTAVariant& variant, const EvalOptions& options) {
  if (videos.empty()) throw ShapeError("evaluate: empty split");
  if (model.config().num_classes != dataset.num_classes) {
    throw ShapeError("evaluate: model has " + std::to_string(model.config().num_classes) +
                     " classes, dataset has " + std::to_string(dataset.num_classes));
  }
  if (model.config().input_mode != variant.input_mode) {
    throw ShapeError("evaluate: variant input mode " + to_string(variant.input_mode) +
                     " does not match model input mode " + to_string(model.config().input_mode));
  }
  NoGradGuard no_grad;
  const bool was_training = model.training();
  model.set_training(false);
  const Index clip_len = model.active_clip_len();
  const Index window = variant_window_frames(variant, clip_len);

  EvalResult result;
  std::vector<int> labels;
  for (std::size_t vi : videos) {
    const VideoClip& video = dataset.clips.at(vi);
    Rng rng(derive_seed(options.seed, "eval", {fnv1a64(video.id)}));
    const auto starts =
        window_starts(video.frames.dim(1), window, variant.stride, options.policy, options.num_clips, rng);
    std::vector<Tensor> inputs;
    for (Index s : starts) {
      inputs.push_back(variant_input(gather_window(video.frames, s, window, variant.stride), variant, clip_len,
                                     options.eval_config, dataset, rng));
    }
    const Tensor logits = model.forward(stack_clips(inputs));
    const Tensor avg = mean_axis1(logits.reshape({1, logits.dim(0), logits.dim(1)}));

    LogitRecord r;
    r.video_id = video.id;
    r.model_id = options.model_id;
    r.variant = to_string(variant.kind);
    r.stride = variant.stride;
    r.input_mode = to_string(variant.input_mode);
    r.logits.assign(avg.data().begin(), avg.data().end());
    for (double v : r.logits) {
      if (!std::isfinite(v)) throw NumericalError("evaluate: non-finite logit for video '" + video.id + "'");
    }
    result.predictions.push_back(argmax(r.logits));
    labels.push_back(video.label);
    result.records.push_back(std::move(r));
  }
  result.accuracy = accuracy(result.predictions, labels);
  model.set_training(was_training);
  return result;
}

}  // namespace tg
