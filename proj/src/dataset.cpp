#include "tg/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "tg/binio.hpp"
#include "tg/rng.hpp"

namespace tg {

void Dataset::compute_norm_stats() {
  const auto train = train_indices(*this);
  const Index c_n = channels, per_c = frames * height * width;
  norm_mean.assign(static_cast<std::size_t>(c_n), 0.0);
  norm_std.assign(static_cast<std::size_t>(c_n), 1.0);
  diff_mean.assign(static_cast<std::size_t>(c_n), 0.0);
  diff_std.assign(static_cast<std::size_t>(c_n), 1.0);
  if (train.empty()) return;
  const Index plane = height * width;
  for (Index c = 0; c < c_n; ++c) {
    double s = 0.0, ss = 0.0, dss = 0.0;
    double count = 0.0, dcount = 0.0;
    for (std::size_t i : train) {
      const double* x = clips[i].frames.data().data() + c * per_c;
      for (Index j = 0; j < per_c; ++j) s += x[j];
      count += static_cast<double>(per_c);
      for (Index j = plane; j < per_c; ++j) {
        const double d = x[j] - x[j - plane];
        dss += d * d;
      }
      dcount += static_cast<double>(per_c - plane);
    }
    const double mean = s / count;
    for (std::size_t i : train) {
      const double* x = clips[i].frames.data().data() + c * per_c;
      for (Index j = 0; j < per_c; ++j) ss += (x[j] - mean) * (x[j] - mean);
    }
    const double sd = std::sqrt(ss / count);
    norm_mean[c] = mean;
    norm_std[c] = sd > 0.0 ? sd : 1.0;
    const double drms = dcount > 0.0 ? std::sqrt(dss / dcount) : 0.0;
    diff_std[c] = drms > 0.0 ? drms : 1.0;
  }
}

void write_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open dataset for writing: " + path);
  os.write(kDatasetMagic, 8);
  binio::put_u32(os, static_cast<std::uint32_t>(ds.clips.size()));
  for (Index v : {ds.channels, ds.frames, ds.height, ds.width, ds.num_classes}) {
    binio::put_u32(os, static_cast<std::uint32_t>(v));
  }
  for (Index c = 0; c < ds.channels; ++c) binio::put_f64(os, ds.norm_mean.at(c));
  for (Index c = 0; c < ds.channels; ++c) binio::put_f64(os, ds.norm_std.at(c));
  const Index n = ds.channels * ds.frames * ds.height * ds.width;
  for (const VideoClip& clip : ds.clips) {
    if (clip.frames.numel() != n) throw ShapeError("write_dataset: clip '" + clip.id + "' has wrong size");
    binio::put_u32(os, static_cast<std::uint32_t>(clip.label));
    binio::put_string(os, clip.id);
    binio::put_f32_array(os, clip.frames.data().data(), clip.frames.data().size());
  }
  if (!os) throw std::runtime_error("failed writing dataset: " + path);
}

Dataset read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open dataset: " + path);
  binio::expect_magic(is, kDatasetMagic, "dataset " + path);
  Dataset ds;
  const std::uint32_t count = binio::get_u32(is);
  ds.channels = binio::get_u32(is);
  ds.frames = binio::get_u32(is);
  ds.height = binio::get_u32(is);
  ds.width = binio::get_u32(is);
  ds.num_classes = binio::get_u32(is);
  if (ds.channels < 1 || ds.channels > 64) throw binio::FormatError("dataset: implausible channel count");
  for (Index c = 0; c < ds.channels; ++c) ds.norm_mean.push_back(binio::get_f64(is));
  for (Index c = 0; c < ds.channels; ++c) ds.norm_std.push_back(binio::get_f64(is));
  const Shape shape{ds.channels, ds.frames, ds.height, ds.width};
  const Index n = numel_of(shape);
  ds.clips.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    VideoClip clip;
    clip.label = static_cast<int>(binio::get_u32(is));
    if (clip.label >= ds.num_classes) {
      throw binio::FormatError("dataset: label " + std::to_string(clip.label) + " out of range");
    }
    clip.id = binio::get_string(is);
    std::vector<double> values(static_cast<std::size_t>(n));
    binio::get_f32_array(is, values.data(), values.size());
    clip.frames = Tensor(shape, std::move(values));
    ds.clips.push_back(std::move(clip));
  }
  if (is.peek() != std::char_traits<char>::eof()) {
    throw binio::FormatError("dataset: trailing bytes after last clip");
  }
  // Header stats are authoritative; only the diff statistics are derived.
  const auto mean = ds.norm_mean, sd = ds.norm_std;
  ds.compute_norm_stats();
  ds.norm_mean = mean;
  ds.norm_std = sd;
  return ds;
}

bool is_validation_id(const std::string& id) { return fnv1a64(id) % 10 == 0; }

std::vector<std::size_t> train_indices(const Dataset& ds) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < ds.clips.size(); ++i) {
    if (!is_validation_id(ds.clips[i].id)) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> validation_indices(const Dataset& ds) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < ds.clips.size(); ++i) {
    if (is_validation_id(ds.clips[i].id)) out.push_back(i);
  }
  return out;
}

std::string to_string(MotionSet m) { return m == MotionSet::cardinal ? "cardinal" : "flip_invariant"; }

MotionSet parse_motion_set(const std::string& s) {
  if (s == "cardinal") return MotionSet::cardinal;
  if (s == "flip_invariant") return MotionSet::flip_invariant;
  throw ShapeError("unknown motion set '" + s + "' (cardinal|flip_invariant)");
}

void SyntheticSpec::validate() const {
  if (num_classes < 1 || num_classes > 4) throw ShapeError("synthetic: num_classes must be in [1, 4]");
  if (frame_size < 2) throw ShapeError("synthetic: frame_size must be >= 2");
  if (clip_frames < 1) throw ShapeError("synthetic: clip_frames must be positive");
  if (object_min < 1 || object_max < object_min) throw ShapeError("synthetic: bad object size range");
  if (object_max > frame_size) {
    throw ShapeError("synthetic: object size " + std::to_string(object_max) + " exceeds frame size " +
                     std::to_string(frame_size));
  }
  if (speed_min < 1 || speed_max < speed_min) {
    throw ShapeError("synthetic: speed range must satisfy 1 <= min <= max");
  }
  if (!(noise_std >= 0.0)) throw ShapeError("synthetic: noise_std must be non-negative");
  if (samples_per_class < 1) throw ShapeError("synthetic: samples_per_class must be positive");
}

std::pair<int, int> class_direction(MotionSet set, int label) {
  static constexpr std::pair<int, int> cardinal[4] = {{-1, 0}, {1, 0}, {0, -1}, {0, 1}};
  static constexpr std::pair<int, int> invariant[4] = {{-1, 0}, {1, 0}, {0, 1}, {1, 1}};
  if (label < 0 || label > 3) throw ShapeError("class_direction: label out of range");
  return set == MotionSet::cardinal ? cardinal[label] : invariant[label];
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.channels = 3;
  ds.frames = spec.clip_frames;
  ds.height = ds.width = spec.frame_size;
  ds.num_classes = spec.num_classes;
  const Index total = spec.num_classes * spec.samples_per_class;
  const Index s = spec.frame_size, plane = s * s;
  for (Index i = 0; i < total; ++i) {
    Rng rng(derive_seed(spec.seed, "synthetic", {static_cast<std::uint64_t>(i)}));
    const int label = static_cast<int>(i % spec.num_classes);
    auto [dy, dx] = class_direction(spec.motion_set, label);
    if (spec.motion_set == MotionSet::flip_invariant) {
      // horizontal and diagonal classes pick their signs per clip
      if (label == 2 && rng.bernoulli(0.5)) dx = -dx;
      if (label == 3) {
        if (rng.bernoulli(0.5)) dy = -dy;
        if (rng.bernoulli(0.5)) dx = -dx;
      }
    }
    const Index speed = rng.between(spec.speed_min, spec.speed_max);
    const Index size = rng.between(spec.object_min, spec.object_max);
    const Index y0 = rng.between(0, s - 1), x0 = rng.between(0, s - 1);
    const double bg = rng.uniform(0.05, 0.45), fg = rng.uniform(0.55, 0.95);
    std::vector<double> v(static_cast<std::size_t>(3 * spec.clip_frames * plane));
    for (Index t = 0; t < spec.clip_frames; ++t) {
      const Index oy = ((y0 + dy * speed * t) % s + s) % s;
      const Index ox = ((x0 + dx * speed * t) % s + s) % s;
      for (Index y = 0; y < s; ++y) {
        const bool in_y = ((y - oy) % s + s) % s < size;
        for (Index x = 0; x < s; ++x) {
          const bool in = in_y && ((x - ox) % s + s) % s < size;
          for (int c = 0; c < 3; ++c) {
            double val = in ? fg : bg;
            if (spec.noise_std > 0.0) val += spec.noise_std * rng.normal();
            val = std::clamp(val, 0.0, 1.0);
            v[static_cast<std::size_t>((c * spec.clip_frames + t) * plane + y * s + x)] =
                static_cast<double>(static_cast<float>(val));
          }
        }
      }
    }
    char id[32];
    std::snprintf(id, sizeof id, "clip_%05lld", static_cast<long long>(i));
    ds.clips.push_back({id, Tensor({3, spec.clip_frames, s, s}, std::move(v)), label});
  }
  ds.compute_norm_stats();
  return ds;
}

}  // namespace tg
