"""Bridges between raw world-frame splats and the normalized diffusion space.

Diffusion runs on standardized splat parameters expressed in the frame of
the conditioning camera, so the same image-to-splats mapping holds for any
camera pose (only relative pose matters). These helpers move sets between
that space and world-frame raw parameters, on plain arrays and on autodiff
tensors (the tensor path is affine, so gradients flow through it).
"""

from __future__ import annotations

import numpy as np

from .cameras import Camera
from .nn.autodiff import Tensor, concat
from .splats import (
    CENTER, COLOR, GaussianSet, LOG_SCALE, OPACITY, QUAT,
    quat_left_multiply_matrix, rotation_to_quat,
)


def world_to_frame(splats: GaussianSet, cam: Camera) -> GaussianSet:
    """Express a world-frame set in the camera's frame."""
    return splats.transformed(cam.rotation, cam.translation)


def frame_to_world(splats: GaussianSet, cam: Camera) -> GaussianSet:
    """Inverse of world_to_frame."""
    return splats.transformed(cam.rotation.T, -cam.rotation.T @ cam.translation)


def frame_to_world_tensor(params: Tensor, cam: Camera) -> Tensor:
    """frame_to_world on a (N, 14) raw-parameter tensor, differentiably."""
    dtype = params.data.dtype
    R = cam.rotation.T.astype(dtype)            # camera-to-world
    t = (-cam.rotation.T @ cam.translation).astype(dtype)
    q_inv = rotation_to_quat(cam.rotation.T)
    L = quat_left_multiply_matrix(q_inv).astype(dtype)

    center = params[:, CENTER] @ Tensor(R.T) + Tensor(t)
    quat = params[:, QUAT] @ Tensor(L.T)
    return concat(
        [center, params[:, LOG_SCALE], quat, params[:, OPACITY:OPACITY + 1], params[:, COLOR]],
        axis=1,
    )


def denormalize_tensor(params: Tensor, normalizer) -> Tensor:
    """Normalized (N, 14) tensor -> raw parameters, differentiably."""
    normalizer._require_fitted()
    dtype = params.data.dtype
    return params * Tensor(normalizer.std.astype(dtype)) + Tensor(normalizer.mean.astype(dtype))


def teacher_to_diffusion(splats: GaussianSet, cam: Camera, normalizer) -> np.ndarray:
    """World-frame teacher output -> normalized source-frame parameters."""
    return normalizer.normalize(world_to_frame(splats, cam)).params
