#pragma once

#include <array>
#include <span>
#include <vector>

#include "tg/tensor.hpp"

namespace tg {

using Triple = std::array<Index, 3>;
using Pair = std::array<Index, 2>;

// Convolution and pooling ---------------------------------------------------

/// Direct 3D convolution with zero padding over [N, Cin, T, H, W].
/// weight is [Cout, Cin, kt, kh, kw]; bias is optional [Cout].
Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias = {},
              Triple stride = {1, 1, 1}, Triple padding = {0, 0, 0});

/// 2D convolution over [N, Cin, H, W]; runs through conv3d with a unit
/// temporal axis.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias = {},
              Pair stride = {1, 1}, Pair padding = {0, 0});

/// Max pooling without padding. Gradient goes to the first maximum in
/// row-major window order.
Tensor maxpool3d(const Tensor& input, Triple kernel, Triple stride);

// Pointwise -----------------------------------------------------------------

Tensor elu(const Tensor& input, double alpha = 1.0);
Tensor relu(const Tensor& input);

enum class Activation { elu, relu, identity };
Tensor activate(const Tensor& input, Activation act);

Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

// Normalisation -------------------------------------------------------------

/// Running statistics of one batch-norm layer. All three are plain tensors so
/// they travel through checkpoints alongside parameters.
struct BatchNormBuffers {
  Tensor running_mean;  // [C]
  Tensor running_var;   // [C]
  Tensor batches_seen;  // [1]

  static BatchNormBuffers create(Index channels);
};

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Per-channel normalisation over axis 1 of [N, C, ...]. Training mode uses
/// batch statistics and updates the running averages; eval mode reads them.
Tensor batchnorm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                 BatchNormBuffers& buffers, bool training,
                 double epsilon = kBatchNormEpsilon, double momentum = kBatchNormMomentum);

// Dense ---------------------------------------------------------------------

/// [N, F] x [C, F]^T + [C] -> [N, C]
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);

struct CrossEntropyResult {
  Tensor loss;         // one element, differentiable w.r.t. logits
  Tensor grad_logits;  // (softmax - onehot) / N, detached
};

CrossEntropyResult softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

// Shape plumbing ------------------------------------------------------------

/// Concatenate along axis 1 (channels).
Tensor concat_channels(const std::vector<Tensor>& parts);

/// Mean over every axis after the first two: [N, C, ...] -> [N, C].
Tensor global_avg_pool(const Tensor& input);

/// Mean over axis 1: [A, B, ...] -> [A, ...]. Computed relative to the first
/// slice so B identical slices reproduce that slice exactly.
Tensor mean_axis1(const Tensor& input);

/// Picks frames start, start+step, ... (count of them) along axis 2 of
/// [N, C, T, H, W].
Tensor select_frames(const Tensor& input, Index start, Index step, Index count);

/// [N, C, T, H, W] -> [N*T, C, H, W] (frame-major).
Tensor clip_to_frames(const Tensor& input);
/// [N*T, C, H, W] -> [N, C, T, H, W].
Tensor frames_to_clip(const Tensor& input, Index frames);

Tensor sum(const Tensor& input);
/// sum_i w_i * x_i; weights must match numel.
Tensor weighted_sum(const Tensor& input, std::span<const double> weights);

}  // namespace tg
