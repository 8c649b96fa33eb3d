#pragma once

#include <optional>
#include <string>

#include "tg/ops.hpp"

namespace tg {

/// Exact non-negative fraction, written "p/q" in configs.
struct Rational {
  Index num = 0;
  Index den = 1;

  static Rational parse(const std::string& text);
  std::string str() const;
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  /// floor(n * num / den) without rounding error.
  Index floor_times(Index n) const { return n * num / den; }
  bool operator==(const Rational& o) const { return num * o.den == o.num * den; }
};

// Temporal shift -------------------------------------------------------------

struct ShiftSpec {
  Rational fraction_forward{1, 8};
  Rational fraction_backward{1, 8};
  /// Shift inside the residual branch (x + F(shift(x))) rather than the trunk.
  bool residual_embedding = true;

  static ShiftSpec none() { return {{0, 1}, {0, 1}, true}; }
  bool is_identity() const { return fraction_forward.num == 0 && fraction_backward.num == 0; }
  void validate() const;
};

/// Shift over [N, C, T, H, W]. The first floor(C*ff) channels read frame t-1,
/// the next floor(C*fb) read frame t+1; vacated frames are zero-filled.
Tensor tsm_shift(const Tensor& input, const ShiftSpec& spec);

/// Same shift over the frame-major layout [N*T, C, H, W].
Tensor tsm_shift_frames(const Tensor& input, std::optional<Index> frames, const ShiftSpec& spec);

// (2+1)D factorised convolution ----------------------------------------------

struct Conv2Plus1DSpec {
  Index in_channels = 1;
  Index out_channels = 1;
  Index k = 3;
  std::optional<Index> mid_channels;  // nullopt = matched

  /// floor(k^3*Cin*Cout / (k^2*Cin + k*Cout)) unless set explicitly.
  Index mid() const;
  Index factored_weight_count() const { return k * k * in_channels * mid() + k * mid() * out_channels; }
  Index full3d_weight_count() const { return k * k * k * in_channels * out_channels; }
  void validate() const;
};

Index matched_mid_channels(Index in_channels, Index out_channels, Index k);

struct Conv2Plus1DWeights {
  Tensor spatial;   // [M, Cin, 1, k, k]
  Tensor temporal;  // [Cout, M, k, 1, 1]
  /// Normalisation between the stages; skipped when gamma is undefined.
  Tensor gamma, beta;
  BatchNormBuffers* buffers = nullptr;
  Activation activation = Activation::elu;
};

/// Spatial (1,k,k) conv -> [norm] -> activation -> temporal (k,1,1) conv, with
/// (k-1)/2 padding so T, H, W are preserved. spatial_stride downsamples H, W.
Tensor conv2plus1d(const Tensor& input, const Conv2Plus1DSpec& spec,
                   const Conv2Plus1DWeights& weights, bool training = true,
                   Index spatial_stride = 1);

// Residual frames ------------------------------------------------------------

/// out[..., t, :, :] = in[..., t+1, :, :] - in[..., t, :, :] along the time axis
/// of [C, T, H, W] or [N, C, T, H, W].
Tensor residual_frames(const Tensor& clip);

// SlowFast lateral connection ------------------------------------------------

inline constexpr Index kLateralKernelT = 5;

/// Fast features [N, Cf, alpha*Ts, H, W] go through a (5,1,1) conv with
/// stride (alpha,1,1) mapping Cf -> 2*Cf, then are appended to the slow
/// features' channels. fuse_weight is [2*Cf, Cf, 5, 1, 1].
Tensor lateral_fuse(const Tensor& fast, const Tensor& slow, Index alpha, const Tensor& fuse_weight,
                    const Tensor& fuse_bias = {});

}  // namespace tg
