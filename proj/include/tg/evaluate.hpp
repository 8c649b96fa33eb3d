#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tg/augment.hpp"
#include "tg/logits.hpp"

namespace tg {

enum class TTAKind { center_crop, horizontal_flip, random_crop, reverse_order, normal_reverse_concat };

/// Kebab-case names: center-crop, horizontal-flip, random-crop, reverse-order,
/// normal-reverse-concat.
std::string to_string(TTAKind k);
TTAKind parse_tta_kind(const std::string& s);
const std::vector<std::string>& tta_names();

struct TTAVariant {
  TTAKind kind = TTAKind::center_crop;
  int stride = 1;
  InputMode input_mode = InputMode::rgb;
};

/// Model-ready input of one sampled window under a variant. The window is the
/// raw clip (values in [0, 1]); the variant's spatial and temporal transforms
/// run before normalisation.
Tensor variant_input(const Tensor& window, const TTAVariant& variant, Index clip_len,
                     const AugmentConfig& eval_config, const Dataset& stats, Rng& rng);

/// Frames a window must hold for a variant (normal-reverse-concat needs only
/// half, rounded up).
Index variant_window_frames(const TTAVariant& variant, Index clip_len);

struct EvalOptions {
  Index num_clips = 10;
  std::uint64_t seed = 42;
  SamplePolicy policy = SamplePolicy::random;
  std::string model_id = "model";
  /// Only base_size and crop_size are read.
  AugmentConfig eval_config{};
};

struct EvalResult {
  double accuracy = 0.0;
  std::vector<LogitRecord> records;  // in the order of the requested videos
  std::vector<int> predictions;
};

/// Per video: sample windows (seeded by the video id), transform, forward, and
/// average the pre-softmax logits over windows.
EvalResult evaluate(Model& model, const Dataset& dataset, const std::vector<std::size_t>& videos,
                    const TTAVariant& variant, const EvalOptions& options);

}  // namespace tg
