#include "tg/augment.hpp"

#include <algorithm>
#include <cmath>

#include "tg/video_ops.hpp"

namespace tg {

namespace {

struct Dims {
  Index c, t, h, w;
};

Dims dims_of(const Tensor& clip, const char* what) {
  if (clip.ndim() != 4) {
    throw ShapeError(std::string(what) + ": expected [C, T, H, W], got " + shape_str(clip.shape()));
  }
  return {clip.dim(0), clip.dim(1), clip.dim(2), clip.dim(3)};
}

}  // namespace

void AugmentConfig::validate() const {
  if (base_size < 1 || crop_size < 1) throw ShapeError("augment: sizes must be positive");
  if (!(scale_min > 0.0) || scale_max < scale_min) throw ShapeError("augment: bad scale range");
  const auto smallest = static_cast<Index>(std::floor(static_cast<double>(base_size) * scale_min));
  if (crop_size > smallest) {
    throw ShapeError("augment: crop_size " + std::to_string(crop_size) + " exceeds floor(base_size * scale_min) = " +
                     std::to_string(smallest));
  }
  for (double p : {flip_prob, reverse_prob}) {
    if (!(p >= 0.0 && p <= 1.0)) throw ShapeError("augment: probabilities must lie in [0, 1]");
  }
  if (!(lighting >= 0.0) || !(contrast >= 0.0) || contrast >= 1.0) {
    throw ShapeError("augment: jitter amplitudes must be non-negative (contrast < 1)");
  }
  if (strides.empty()) throw ShapeError("augment: stride choices must not be empty");
  for (Index s : strides) {
    if (s != 1 && s != 2) throw ShapeError("augment: stride choices must be 1 or 2");
  }
}

std::uint64_t augment_seed(const AugmentConfig& config, Index epoch, Index sample_index) {
  return derive_seed(config.seed, "augment",
                     {static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(sample_index)});
}

std::string to_string(SamplePolicy p) {
  switch (p) {
    case SamplePolicy::random: return "random";
    case SamplePolicy::center: return "center";
    case SamplePolicy::ten_random: return "ten_random";
    case SamplePolicy::consecutive: return "consecutive";
  }
  return "?";
}

SamplePolicy parse_sample_policy(const std::string& s) {
  if (s == "random") return SamplePolicy::random;
  if (s == "center") return SamplePolicy::center;
  if (s == "ten_random") return SamplePolicy::ten_random;
  if (s == "consecutive") return SamplePolicy::consecutive;
  throw ShapeError("unknown sample policy '" + s + "' (random|center|ten_random|consecutive)");
}

std::vector<Index> window_starts(Index video_frames, Index out_frames, Index stride,
                                 SamplePolicy policy, Index num_clips, Rng& rng) {
  if (out_frames <= 0) throw ShapeError("sample_clip: out_frames must be positive");
  if (stride < 1) throw ShapeError("sample_clip: stride must be positive");
  if (video_frames <= 0) throw ShapeError("sample_clip: empty video");
  const Index span = (out_frames - 1) * stride + 1;
  const bool fits = video_frames >= span;
  const Index last_start = fits ? video_frames - span : video_frames - 1;
  auto draw = [&] { return static_cast<Index>(rng.below(static_cast<std::uint64_t>(last_start + 1))); };

  std::vector<Index> starts;
  switch (policy) {
    case SamplePolicy::center:
      starts.push_back(fits ? last_start / 2 : 0);
      break;
    case SamplePolicy::ten_random:
      num_clips = 10;
      [[fallthrough]];
    case SamplePolicy::random:
      if (num_clips < 1) throw ShapeError("sample_clip: num_clips must be positive");
      for (Index i = 0; i < num_clips; ++i) starts.push_back(draw());
      break;
    case SamplePolicy::consecutive: {
      if (num_clips < 1) throw ShapeError("sample_clip: num_clips must be positive");
      const Index first = draw();
      for (Index i = 0; i < num_clips; ++i) starts.push_back((first + i * span) % video_frames);
      break;
    }
  }
  return starts;
}

Tensor gather_window(const Tensor& clip, Index start, Index out_frames, Index stride) {
  const auto [c_n, t_n, h, w] = dims_of(clip, "gather_window");
  const Index plane = h * w;
  std::vector<double> out(static_cast<std::size_t>(c_n * out_frames * plane));
  const double* src = clip.data().data();
  for (Index c = 0; c < c_n; ++c) {
    for (Index i = 0; i < out_frames; ++i) {
      const Index t = (start + i * stride) % t_n;
      std::copy_n(src + (c * t_n + t) * plane, plane, out.data() + (c * out_frames + i) * plane);
    }
  }
  return Tensor({c_n, out_frames, h, w}, std::move(out));
}

std::vector<Tensor> sample_clip(const VideoClip& video, Index out_frames, Index stride,
                                SamplePolicy policy, std::uint64_t seed, Index num_clips) {
  Rng rng(seed);
  const auto starts = window_starts(video.frames.dim(1), out_frames, stride, policy, num_clips, rng);
  std::vector<Tensor> out;
  out.reserve(starts.size());
  for (Index s : starts) out.push_back(gather_window(video.frames, s, out_frames, stride));
  return out;
}

Tensor resize_bilinear(const Tensor& clip, Index out_h, Index out_w) {
  const auto [c_n, t_n, h, w] = dims_of(clip, "resize_bilinear");
  if (out_h < 1 || out_w < 1) throw ShapeError("resize_bilinear: output size must be positive");
  if (out_h == h && out_w == w) return clip.clone();

  struct Tap {
    Index i0, i1;
    double f;
  };
  auto taps = [](Index in, Index out) {
    std::vector<Tap> t(static_cast<std::size_t>(out));
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (Index o = 0; o < out; ++o) {
      const double src = std::clamp((static_cast<double>(o) + 0.5) * ratio - 0.5, 0.0,
                                    static_cast<double>(in - 1));
      const auto i0 = static_cast<Index>(std::floor(src));
      const Index i1 = std::min(i0 + 1, in - 1);
      t[o] = {i0, i1, src - static_cast<double>(i0)};
    }
    return t;
  };
  const auto ty = taps(h, out_h), tx = taps(w, out_w);
  std::vector<double> out(static_cast<std::size_t>(c_n * t_n * out_h * out_w));
  const double* src = clip.data().data();
  for (Index f = 0; f < c_n * t_n; ++f) {
    const double* p = src + f * h * w;
    double* q = out.data() + f * out_h * out_w;
    for (Index y = 0; y < out_h; ++y) {
      const Tap& a = ty[y];
      for (Index x = 0; x < out_w; ++x) {
        const Tap& b = tx[x];
        const double top = p[a.i0 * w + b.i0] * (1.0 - b.f) + p[a.i0 * w + b.i1] * b.f;
        const double bot = p[a.i1 * w + b.i0] * (1.0 - b.f) + p[a.i1 * w + b.i1] * b.f;
        q[y * out_w + x] = top * (1.0 - a.f) + bot * a.f;
      }
    }
  }
  return Tensor({c_n, t_n, out_h, out_w}, std::move(out));
}

Tensor crop(const Tensor& clip, Index top, Index left, Index height, Index width) {
  const auto [c_n, t_n, h, w] = dims_of(clip, "crop");
  if (top < 0 || left < 0 || height < 1 || width < 1 || top + height > h || left + width > w) {
    throw ShapeError("crop: window " + std::to_string(height) + "x" + std::to_string(width) + " at (" +
                     std::to_string(top) + ", " + std::to_string(left) + ") does not fit frame " +
                     std::to_string(h) + "x" + std::to_string(w));
  }
  std::vector<double> out(static_cast<std::size_t>(c_n * t_n * height * width));
  const double* src = clip.data().data();
  for (Index f = 0; f < c_n * t_n; ++f) {
    for (Index y = 0; y < height; ++y) {
      std::copy_n(src + (f * h + top + y) * w + left, width, out.data() + (f * height + y) * width);
    }
  }
  return Tensor({c_n, t_n, height, width}, std::move(out));
}

Tensor center_crop(const Tensor& clip, Index size) {
  const auto d = dims_of(clip, "center_crop");
  return crop(clip, (d.h - size) / 2, (d.w - size) / 2, size, size);
}

Tensor horizontal_flip(const Tensor& clip) {
  const auto [c_n, t_n, h, w] = dims_of(clip, "horizontal_flip");
  std::vector<double> out(static_cast<std::size_t>(clip.numel()));
  const double* src = clip.data().data();
  for (Index row = 0; row < c_n * t_n * h; ++row) {
    std::reverse_copy(src + row * w, src + (row + 1) * w, out.data() + row * w);
  }
  return Tensor(clip.shape(), std::move(out));
}

Tensor reverse_clip(const Tensor& clip) {
  const auto [c_n, t_n, h, w] = dims_of(clip, "reverse_clip");
  const Index plane = h * w;
  std::vector<double> out(static_cast<std::size_t>(clip.numel()));
  const double* src = clip.data().data();
  for (Index c = 0; c < c_n; ++c) {
    for (Index t = 0; t < t_n; ++t) {
      std::copy_n(src + (c * t_n + t_n - 1 - t) * plane, plane, out.data() + (c * t_n + t) * plane);
    }
  }
  return Tensor(clip.shape(), std::move(out));
}

Tensor concat_normal_reverse(const Tensor& clip) {
  const auto [c_n, t_n, h, w] = dims_of(clip, "concat_normal_reverse");
  const Index plane = h * w;
  std::vector<double> out(static_cast<std::size_t>(2 * clip.numel()));
  const double* src = clip.data().data();
  for (Index c = 0; c < c_n; ++c) {
    for (Index t = 0; t < t_n; ++t) {
      const double* frame = src + (c * t_n + t) * plane;
      std::copy_n(frame, plane, out.data() + (c * 2 * t_n + t) * plane);
      std::copy_n(frame, plane, out.data() + (c * 2 * t_n + 2 * t_n - 1 - t) * plane);
    }
  }
  return Tensor({c_n, 2 * t_n, h, w}, std::move(out));
}

Tensor augment(const Tensor& clip, const AugmentConfig& config, bool train, std::uint64_t decision_seed) {
  Rng rng(decision_seed);
  return augment(clip, config, train, rng);
}

Tensor augment(const Tensor& clip, const AugmentConfig& config, bool train, Rng& rng) {
  if (!train) return eval_transform(clip, config, EvalView{}, rng);
  dims_of(clip, "augment");
  const double s = rng.uniform(config.scale_min, config.scale_max);
  const auto size = static_cast<Index>(std::lround(static_cast<double>(config.base_size) * s));
  Tensor x = resize_bilinear(clip, size, size);

  const Index room = size - config.crop_size;
  if (room < 0) throw ShapeError("augment: scaled frame is smaller than the crop");
  Index top, left;
  if (config.corner_crop) {
    // four corners and the centre
    switch (rng.below(5)) {
      case 0: top = 0, left = 0; break;
      case 1: top = 0, left = room; break;
      case 2: top = room, left = 0; break;
      case 3: top = room, left = room; break;
      default: top = room / 2, left = room / 2; break;
    }
  } else {
    top = static_cast<Index>(rng.below(static_cast<std::uint64_t>(room + 1)));
    left = static_cast<Index>(rng.below(static_cast<std::uint64_t>(room + 1)));
  }
  x = crop(x, top, left, config.crop_size, config.crop_size);

  if (rng.bernoulli(config.flip_prob)) x = horizontal_flip(x);

  const double offset = rng.uniform(-config.lighting, config.lighting);
  const double factor = rng.uniform(1.0 - config.contrast, 1.0 + config.contrast);
  std::span<double> v = x.mutable_data();
  if (offset != 0.0) {
    for (double& e : v) e += offset;
  }
  if (factor != 1.0) {
    double mean = 0.0;
    for (double e : v) mean += e;
    mean /= static_cast<double>(v.size());
    for (double& e : v) e = mean + factor * (e - mean);
  }
  for (double& e : v) e = std::clamp(e, 0.0, 1.0);

  if (rng.bernoulli(config.reverse_prob)) x = reverse_clip(x);
  return x;
}

Tensor eval_transform(const Tensor& clip, const AugmentConfig& config, const EvalView& view, Rng& rng) {
  Tensor x = resize_bilinear(clip, config.base_size, config.base_size);
  if (view.random_crop) {
    const Index room = config.base_size - config.crop_size;
    const auto top = static_cast<Index>(rng.below(static_cast<std::uint64_t>(room + 1)));
    const auto left = static_cast<Index>(rng.below(static_cast<std::uint64_t>(room + 1)));
    x = crop(x, top, left, config.crop_size, config.crop_size);
  } else {
    x = center_crop(x, config.crop_size);
  }
  if (view.flip) x = horizontal_flip(x);
  return x;
}

Tensor training_sample(const VideoClip& video, Index needed_frames, const AugmentConfig& config,
                       Index epoch, Index sample_index) {
  Rng rng(augment_seed(config, epoch, sample_index));
  const Index stride = config.strides[rng.below(config.strides.size())];
  const auto starts = window_starts(video.frames.dim(1), needed_frames, stride, SamplePolicy::random, 1, rng);
  return augment(gather_window(video.frames, starts[0], needed_frames, stride), config, true, rng);
}

Tensor to_model_input(const Tensor& clip, InputMode mode, const std::vector<double>& mean,
                      const std::vector<double>& std_dev) {
  Tensor x = mode == InputMode::diff ? residual_frames(clip) : clip.clone();
  const auto [c_n, t_n, h, w] = dims_of(x, "to_model_input");
  if (static_cast<Index>(mean.size()) != c_n || static_cast<Index>(std_dev.size()) != c_n) {
    throw ShapeError("to_model_input: normalisation statistics have " + std::to_string(mean.size()) +
                     " channels, clip has " + std::to_string(c_n));
  }
  std::span<double> v = x.mutable_data();
  const Index per_c = t_n * h * w;
  for (Index c = 0; c < c_n; ++c) {
    const double m = mean[c], s = std_dev[c];
    if (m == 0.0 && s == 1.0) continue;
    for (Index j = 0; j < per_c; ++j) v[c * per_c + j] = (v[c * per_c + j] - m) / s;
  }
  return x;
}

Tensor to_model_input(const Tensor& clip, InputMode mode, const Dataset& stats) {
  return mode == InputMode::diff ? to_model_input(clip, mode, stats.diff_mean, stats.diff_std)
                                 : to_model_input(clip, mode, stats.norm_mean, stats.norm_std);
}

Tensor stack_clips(const std::vector<Tensor>& clips) {
  if (clips.empty()) throw ShapeError("stack_clips: no clips");
  const Shape& s = clips[0].shape();
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(clips.size() * clips[0].numel()));
  for (const Tensor& c : clips) {
    if (c.shape() != s) throw ShapeError("stack_clips: shape " + shape_str(c.shape()) + " vs " + shape_str(s));
    out.insert(out.end(), c.data().begin(), c.data().end());
  }
  Shape shape{static_cast<Index>(clips.size())};
  shape.insert(shape.end(), s.begin(), s.end());
  return Tensor(std::move(shape), std::move(out));
}

}  // namespace tg
