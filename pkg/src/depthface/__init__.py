"""Depth-only 3D facial pose tracking with a statistical multilinear face model.

The registration objective scores each model-to-frame ray as either visible or
occluded, accumulates per-ray KL divergences, and couples frames through a
temporal depth-consistency term and an accumulating scale prior. Identity is
adapted online through conjugate Bayesian updates over the model's identity
weights, with switching between previously seen faces.
"""

__version__ = "0.1.0"

from .geometry import (
    CameraIntrinsics,
    DepthFrame,
    Pose,
    Rect,
    compose,
    transform,
)

__all__ = [
    "CameraIntrinsics",
    "DepthFrame",
    "Pose",
    "Rect",
    "compose",
    "transform",
    "__version__",
]
