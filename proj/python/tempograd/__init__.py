"""Python bindings for the tempograd C++ core."""

from ._core import (
    Model,
    NumericalError,
    ShapeError,
    argmax,
    conv2plus1d_weight_counts,
    conv3d,
    conv3d_backward,
    count_parameters,
    ensemble,
    gradcheck,
    matched_mid_channels,
    maxpool3d,
    residual_frames,
    run_cli,
    softmax,
    temporal_shift,
)

__all__ = [
    "Model",
    "NumericalError",
    "ShapeError",
    "argmax",
    "conv2plus1d_weight_counts",
    "conv3d",
    "conv3d_backward",
    "count_parameters",
    "ensemble",
    "gradcheck",
    "matched_mid_channels",
    "maxpool3d",
    "residual_frames",
    "run_cli",
    "softmax",
    "temporal_shift",
]
