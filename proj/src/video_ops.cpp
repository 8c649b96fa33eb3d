#include "tg/video_ops.hpp"

#include <algorithm>
#include <sstream>

namespace tg {

using detail::make_result;

Rational Rational::parse(const std::string& text) {
  Rational r;
  const auto slash = text.find('/');
  try {
    std::size_t used = 0;
    if (slash == std::string::npos) {
      r.num = std::stoll(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
      r.den = 1;
    } else {
      const std::string a = text.substr(0, slash), b = text.substr(slash + 1);
      r.num = std::stoll(a, &used);
      if (used != a.size()) throw std::invalid_argument(text);
      r.den = std::stoll(b, &used);
      if (used != b.size()) throw std::invalid_argument(text);
    }
  } catch (const std::exception&) {
    throw ShapeError("not a fraction: '" + text + "'");
  }
  if (r.den <= 0 || r.num < 0) throw ShapeError("fraction must be non-negative: '" + text + "'");
  return r;
}

std::string Rational::str() const { return std::to_string(num) + "/" + std::to_string(den); }

void ShiftSpec::validate() const {
  const Rational half{1, 2};
  auto le_half = [&](const Rational& f) { return f.num * half.den <= half.num * f.den; };
  if (!le_half(fraction_forward) || !le_half(fraction_backward)) {
    throw ShapeError("shift fractions must lie in [0, 1/2]");
  }
}

namespace {

// One [B, C, T, inner] block layout serves both 5D clips (B=N, inner=H*W,
// stride between frames = inner) and frame-major tensors.
struct ShiftLayout {
  Index n, c, t, hw;
  bool frame_major;

  Index offset(Index i, Index ch, Index f) const {
    return frame_major ? ((i * t + f) * c + ch) * hw : ((i * c + ch) * t + f) * hw;
  }
};

// Source frame for output frame f of channel ch, or -1 for zero fill.
Index shift_source(Index ch, Index f, Index t, Index fwd, Index bwd) {
  if (ch < fwd) return f - 1;
  if (ch < fwd + bwd) return f + 1 < t ? f + 1 : -1;
  return f;
}

Tensor apply_shift(const Tensor& input, const ShiftLayout& lay, const ShiftSpec& spec) {
  spec.validate();
  const Index fwd = spec.fraction_forward.floor_times(lay.c);
  const Index bwd = spec.fraction_backward.floor_times(lay.c);
  if (fwd + bwd > lay.c) throw ShapeError("tsm_shift: shifted channels exceed C");
  auto x = input.data();
  std::vector<double> out(x.size(), 0.0);
  for (Index i = 0; i < lay.n; ++i) {
    for (Index ch = 0; ch < lay.c; ++ch) {
      for (Index f = 0; f < lay.t; ++f) {
        const Index src = shift_source(ch, f, lay.t, fwd, bwd);
        if (src < 0) continue;
        std::copy_n(x.data() + lay.offset(i, ch, src), lay.hw, out.data() + lay.offset(i, ch, f));
      }
    }
  }
  return make_result(input.shape(), std::move(out), {input},
                     [input, lay, fwd, bwd](std::span<const double> gy) {
                       // adjoint: route each output frame's gradient back to its source
                       std::vector<double> dx(gy.size(), 0.0);
                       for (Index i = 0; i < lay.n; ++i) {
                         for (Index ch = 0; ch < lay.c; ++ch) {
                           for (Index f = 0; f < lay.t; ++f) {
                             const Index src = shift_source(ch, f, lay.t, fwd, bwd);
                             if (src < 0) continue;
                             const double* g = gy.data() + lay.offset(i, ch, f);
                             double* d = dx.data() + lay.offset(i, ch, src);
                             for (Index j = 0; j < lay.hw; ++j) d[j] += g[j];
                           }
                         }
                       }
                       input.impl()->accumulate_grad(std::move(dx));
                     });
}

}  // namespace

Tensor tsm_shift(const Tensor& input, const ShiftSpec& spec) {
  if (!input.defined() || input.ndim() != 5) throw ShapeError("tsm_shift: expected [N,C,T,H,W]");
  const Shape& s = input.shape();
  return apply_shift(input, {s[0], s[1], s[2], s[3] * s[4], false}, spec);
}

Tensor tsm_shift_frames(const Tensor& input, std::optional<Index> frames, const ShiftSpec& spec) {
  if (!frames) throw ShapeError("tsm_shift: frame-major layout needs a known T");
  if (!input.defined() || input.ndim() != 4) throw ShapeError("tsm_shift: expected [N*T,C,H,W]");
  const Shape& s = input.shape();
  const Index t = *frames;
  if (t < 1 || s[0] % t != 0) {
    throw ShapeError("tsm_shift: batch " + std::to_string(s[0]) + " not divisible by T=" +
                     std::to_string(t));
  }
  return apply_shift(input, {s[0] / t, s[1], t, s[2] * s[3], true}, spec);
}

Index matched_mid_channels(Index in_channels, Index out_channels, Index k) {
  return (k * k * k * in_channels * out_channels) / (k * k * in_channels + k * out_channels);
}

Index Conv2Plus1DSpec::mid() const {
  return mid_channels ? *mid_channels : std::max<Index>(1, matched_mid_channels(in_channels, out_channels, k));
}

void Conv2Plus1DSpec::validate() const {
  if (k < 1 || k % 2 == 0) throw ShapeError("conv2plus1d: kernel size must be odd, got " + std::to_string(k));
  if (in_channels < 1 || out_channels < 1) throw ShapeError("conv2plus1d: channel counts must be positive");
  if (mid_channels && *mid_channels < 1) throw ShapeError("conv2plus1d: mid channels must be positive");
}

Tensor conv2plus1d(const Tensor& input, const Conv2Plus1DSpec& spec,
                   const Conv2Plus1DWeights& weights, bool training, Index spatial_stride) {
  spec.validate();
  const Index m = spec.mid(), k = spec.k, p = (k - 1) / 2;
  const Shape want_s{m, spec.in_channels, 1, k, k}, want_t{spec.out_channels, m, k, 1, 1};
  if (weights.spatial.shape() != want_s || weights.temporal.shape() != want_t) {
    throw ShapeError("conv2plus1d: weights " + shape_str(weights.spatial.shape()) + "/" +
                     shape_str(weights.temporal.shape()) + " do not match spec " +
                     shape_str(want_s) + "/" + shape_str(want_t));
  }
  Tensor h = conv3d(input, weights.spatial, {}, {1, spatial_stride, spatial_stride}, {0, p, p});
  if (weights.gamma.defined()) {
    if (!weights.buffers) throw ShapeError("conv2plus1d: normalisation without running buffers");
    h = batchnorm(h, weights.gamma, weights.beta, *weights.buffers, training);
  }
  h = activate(h, weights.activation);
  return conv3d(h, weights.temporal, {}, {1, 1, 1}, {p, 0, 0});
}

Tensor residual_frames(const Tensor& clip) {
  if (!clip.defined() || (clip.ndim() != 4 && clip.ndim() != 5)) {
    throw ShapeError("residual_frames: expected [C,T,H,W] or [N,C,T,H,W]");
  }
  const Shape& s = clip.shape();
  const std::size_t ta = s.size() - 3;
  const Index t = s[ta];
  if (t < 2) throw ShapeError("residual_frames: need at least 2 frames, got " + std::to_string(t));
  const Index hw = s[ta + 1] * s[ta + 2];
  const Index outer = clip.numel() / (t * hw);
  Shape out_shape = s;
  out_shape[ta] = t - 1;
  auto x = clip.data();
  std::vector<double> out(static_cast<std::size_t>(outer * (t - 1) * hw));
  for (Index o = 0; o < outer; ++o) {
    for (Index f = 0; f + 1 < t; ++f) {
      const double* a = x.data() + (o * t + f) * hw;
      const double* b = a + hw;
      double* d = out.data() + (o * (t - 1) + f) * hw;
      for (Index j = 0; j < hw; ++j) d[j] = b[j] - a[j];
    }
  }
  return make_result(out_shape, std::move(out), {clip},
                     [clip, outer, t, hw](std::span<const double> gy) {
                       std::vector<double> dx(static_cast<std::size_t>(clip.numel()), 0.0);
                       for (Index o = 0; o < outer; ++o) {
                         for (Index f = 0; f + 1 < t; ++f) {
                           const double* g = gy.data() + (o * (t - 1) + f) * hw;
                           double* da = dx.data() + (o * t + f) * hw;
                           double* db = da + hw;
                           for (Index j = 0; j < hw; ++j) {
                             da[j] -= g[j];
                             db[j] += g[j];
                           }
                         }
                       }
                       clip.impl()->accumulate_grad(std::move(dx));
                     });
}

Tensor lateral_fuse(const Tensor& fast, const Tensor& slow, Index alpha, const Tensor& fuse_weight,
                    const Tensor& fuse_bias) {
  if (!fast.defined() || !slow.defined() || fast.ndim() != 5 || slow.ndim() != 5) {
    throw ShapeError("lateral_fuse: expected 5D fast and slow features");
  }
  if (alpha < 1) throw ShapeError("lateral_fuse: alpha must be >= 1");
  const Index tf = fast.dim(2), ts = slow.dim(2);
  if (tf % alpha != 0) {
    throw ShapeError("lateral_fuse: fast T=" + std::to_string(tf) + " not divisible by alpha=" +
                     std::to_string(alpha));
  }
  if (tf != alpha * ts) {
    throw ShapeError("lateral_fuse: fast T=" + std::to_string(tf) + " != alpha*" + std::to_string(ts));
  }
  const Index cf = fast.dim(1);
  const Shape want{2 * cf, cf, kLateralKernelT, 1, 1};
  if (fuse_weight.shape() != want) {
    throw ShapeError("lateral_fuse: weight " + shape_str(fuse_weight.shape()) + ", expected " +
                     shape_str(want));
  }
  Tensor lateral = conv3d(fast, fuse_weight, fuse_bias, {alpha, 1, 1}, {kLateralKernelT / 2, 0, 0});
  return concat_channels({slow, lateral});
}

}  // namespace tg
