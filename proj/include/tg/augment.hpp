#pragma once

#include <cstdint>
#include <vector>

#include "tg/dataset.hpp"
#include "tg/models.hpp"
#include "tg/rng.hpp"

namespace tg {

struct AugmentConfig {
  Index base_size = 112;
  double scale_min = 0.8, scale_max = 1.25;
  Index crop_size = 112;
  double flip_prob = 0.5;
  double lighting = 0.1;   // additive offset amplitude
  double contrast = 0.2;   // multiplicative factor amplitude about the clip mean
  bool corner_crop = true;
  double reverse_prob = 0.5;
  std::vector<Index> strides{1, 2};
  std::uint64_t seed = 42;

  void validate() const;
};

/// Seed for the augmentation decisions of one training sample.
std::uint64_t augment_seed(const AugmentConfig& config, Index epoch, Index sample_index);

// Temporal sampling ------------------------------------------------------------

/// random: num_clips independent windows. center: the single centred window.
/// ten_random: exactly ten independent windows. consecutive: num_clips windows
/// laid end to end from one random start.
enum class SamplePolicy { random, center, ten_random, consecutive };

std::string to_string(SamplePolicy p);
SamplePolicy parse_sample_policy(const std::string& s);

/// Window start frames. A video shorter than the window span is read cyclically.
std::vector<Index> window_starts(Index video_frames, Index out_frames, Index stride,
                                 SamplePolicy policy, Index num_clips, Rng& rng);

/// Frames start, start+stride, ... (out_frames of them), indices modulo T.
Tensor gather_window(const Tensor& clip, Index start, Index out_frames, Index stride);

std::vector<Tensor> sample_clip(const VideoClip& video, Index out_frames, Index stride,
                                SamplePolicy policy, std::uint64_t seed, Index num_clips = 1);

// Spatial and photometric transforms on [C, T, H, W] -----------------------------

/// Half-pixel-centre bilinear resize of every frame. Same size is a copy.
Tensor resize_bilinear(const Tensor& clip, Index out_h, Index out_w);
Tensor crop(const Tensor& clip, Index top, Index left, Index height, Index width);
Tensor center_crop(const Tensor& clip, Index size);
Tensor horizontal_flip(const Tensor& clip);
Tensor reverse_clip(const Tensor& clip);
/// [clip ∥ reverse_clip(clip)] along time.
Tensor concat_normal_reverse(const Tensor& clip);

/// Train: scale, crop, flip, lighting, contrast, clamp, reverse, in that order.
/// Eval: resize to base_size and centre crop.
Tensor augment(const Tensor& clip, const AugmentConfig& config, bool train, std::uint64_t decision_seed);
Tensor augment(const Tensor& clip, const AugmentConfig& config, bool train, Rng& rng);

/// Eval-time view: resize to base, then a centre or random crop, optionally flipped.
struct EvalView {
  bool random_crop = false;
  bool flip = false;
};
Tensor eval_transform(const Tensor& clip, const AugmentConfig& config, const EvalView& view, Rng& rng);

/// One training sample: stride choice, random window of needed_frames, then augment.
Tensor training_sample(const VideoClip& video, Index needed_frames, const AugmentConfig& config,
                       Index epoch, Index sample_index);

/// Frames to sample so the model receives clip_len frames (one more for diff).
inline Index frames_needed(Index clip_len, InputMode mode) {
  return mode == InputMode::diff ? clip_len + 1 : clip_len;
}

/// rgb: (x - mean) / std per channel. diff: residual frames, then the same
/// normalisation with the residual statistics.
Tensor to_model_input(const Tensor& clip, InputMode mode, const std::vector<double>& mean,
                      const std::vector<double>& std_dev);
Tensor to_model_input(const Tensor& clip, InputMode mode, const Dataset& stats);

/// Stacks [C, T, H, W] clips into [N, C, T, H, W].
Tensor stack_clips(const std::vector<Tensor>& clips);

}  // namespace tg
