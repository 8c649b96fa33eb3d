#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tg/tensor.hpp"

namespace tg {

/// One labelled video, frames laid out [C, T, H, W] with values in [0, 1].
struct VideoClip {
  std::string id;
  Tensor frames;
  int label = 0;
};

/// In-memory form of a dataset file. Frame values are float32-representable
/// so a write/read cycle is lossless.
struct Dataset {
  Index channels = 3, frames = 0, height = 0, width = 0;
  Index num_classes = 0;
  std::vector<double> norm_mean, norm_std;  // per channel, training split
  std::vector<VideoClip> clips;

  /// Residual-frame normalisation: mean pinned to zero, scale is the RMS of
  /// training-split frame differences per channel. Not stored on disk.
  std::vector<double> diff_mean, diff_std;

  void compute_norm_stats();
};

inline constexpr char kDatasetMagic[8] = {'V', 'I', 'D', 'S', '0', '0', '0', '1'};

void write_dataset(const Dataset& ds, const std::string& path);
Dataset read_dataset(const std::string& path);

/// Deterministic 10% validation split keyed on the clip id.
bool is_validation_id(const std::string& id);
std::vector<std::size_t> train_indices(const Dataset& ds);
std::vector<std::size_t> validation_indices(const Dataset& ds);

// Synthetic motion data --------------------------------------------------------

/// cardinal: up, down, left, right.
/// flip_invariant: up, down, horizontal (either way), diagonal (any of four).
/// The second set keeps its labels under a horizontal flip.
enum class MotionSet { cardinal, flip_invariant };

std::string to_string(MotionSet m);
MotionSet parse_motion_set(const std::string& s);

struct SyntheticSpec {
  Index num_classes = 4;
  Index frame_size = 32;
  Index clip_frames = 24;
  Index object_min = 4, object_max = 8;
  Index speed_min = 1, speed_max = 2;  // pixels per frame
  double noise_std = 0.03;
  Index samples_per_class = 25;
  std::uint64_t seed = 42;
  MotionSet motion_set = MotionSet::cardinal;

  void validate() const;
};

/// Frame-to-frame displacement (dy, dx) of a class, before the per-clip sign
/// and speed draws.
std::pair<int, int> class_direction(MotionSet set, int label);

/// A single square moving at constant velocity with toroidal wrap, plus
/// clamped Gaussian noise. Clip i has label i % num_classes.
Dataset generate_synthetic(const SyntheticSpec& spec);

}  // namespace tg
