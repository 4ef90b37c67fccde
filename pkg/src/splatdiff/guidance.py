"""DDIM sampling, additional-view guided sampling, and per-scene splat fitting.

Guided sampling perturbs the implied noise at each substep with the gradient
of a pixel MSE between the guidance view and the render of the current clean
prediction, scaled by a per-substep strength. Zero strength reproduces the
unguided sampler bit-for-bit on the same rng stream.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .cameras import Camera
from .diffusion_space import denormalize_tensor, frame_to_world, frame_to_world_tensor
from .errors import InvalidInputError
from .nn.autodiff import Tensor, no_grad, zero_grads
from .nn.denoiser import DenoiserModel
from .render import render_tensor
from .schedule import (
    DEFAULT_SAMPLE_STEPS, NoiseSchedule, ddim_step, eps_from_x0, substep_grid,
)
from .splats import D, GaussianSet
from .splats import SplatNormalizer


@dataclass
class GuidanceConfig:
    strength: float = 1.0
    steps: int = DEFAULT_SAMPLE_STEPS
    substep_mask: tuple | None = None   # optional per-substep on/off; default all on
    gs_steps: int = 300                 # per-scene optimization steps for the combined mode
    gs_lr: float = 5e-3

    def strengths(self) -> np.ndarray:
        s = np.full(self.steps, float(self.strength))
        if self.substep_mask is not None:
            mask = np.asarray(self.substep_mask, dtype=bool)
            if mask.shape != (self.steps,):
                raise InvalidInputError("substep mask length must equal the step count")
            s = np.where(mask, s, 0.0)
        if np.any(s < 0):
            raise InvalidInputError("guidance strength must be non-negative")
        return s


def _encode_image(model: DenoiserModel, x_src):
    images = model.images_to_tensor([x_src])
    return model.encode(images)


def sample(model: DenoiserModel, normalizer: SplatNormalizer, schedule: NoiseSchedule,
           x_src, cam_src: Camera, steps: int = DEFAULT_SAMPLE_STEPS,
           rng: np.random.Generator | None = None) -> GaussianSet:
    """Draw splats for a source image: pure-noise start, deterministic steps."""
    rng = rng or np.random.default_rng(0)
    n = model.cfg.grid_cells
    s = rng.standard_normal((n, D)).astype(model.dtype)
    with no_grad():
        encoded = _encode_image(model, x_src)
        grid = substep_grid(schedule.T, steps)
        s0 = None
        for t, t_prev in zip(grid[:-1], grid[1:]):
            s0 = model.predict_x0(Tensor(s[None]), np.array([t]), encoded).data[0]
            s = ddim_step(schedule, s, s0, t, t_prev)
    raw = normalizer.denormalize(GaussianSet(s0.astype(np.float64)))
    return frame_to_world(raw, cam_src)


def guided_sample(model: DenoiserModel, normalizer: SplatNormalizer, schedule: NoiseSchedule,
                  x_src, cam_src: Camera, x_gd, cam_gd: Camera, gcfg: GuidanceConfig,
                  rng: np.random.Generator | None = None,
                  background=None) -> tuple[GaussianSet, list]:
    """Sample conditioned on x_src while steering with a second view.

    Returns the splats and the per-substep guidance-view MSE trace. A
    non-finite guidance gradient downgrades that substep to unguided.
    """
    rng = rng or np.random.default_rng(0)
    if background is None:
        background = np.ones(3)
    n = model.cfg.grid_cells
    s = rng.standard_normal((n, D)).astype(model.dtype)
    strengths = gcfg.strengths()
    grid = substep_grid(schedule.T, gcfg.steps)
    trace = []
    params = model.parameters()
    with no_grad():
        fmap, glob = _encode_image(model, x_src)
    encoded = (Tensor(fmap.data), Tensor(glob.data))  # conditioning is constant w.r.t. s_t
    s0 = None
    for i, (t, t_prev) in enumerate(zip(grid[:-1], grid[1:])):
        w = float(strengths[i])
        if w == 0.0:
            with no_grad():
                s0 = model.predict_x0(Tensor(s[None]), np.array([t]), encoded).data[0]
            raw_np = normalizer.denormalize(GaussianSet(s0.astype(np.float64)))
            world_np = frame_to_world(raw_np, cam_src)
            from .render import render as _render

            diag = _render(world_np, cam_gd, background).values
            trace.append(float(np.mean((diag - np.asarray(x_gd, dtype=np.float64)) ** 2)))
            s = ddim_step(schedule, s, s0, t, t_prev)
            continue
        s_leaf = Tensor(s[None].copy(), requires_grad=True)
        s0_t = model.predict_x0(s_leaf, np.array([t]), encoded)
        raw = denormalize_tensor(s0_t[0], normalizer)
        world = frame_to_world_tensor(raw, cam_src)
        rendered = render_tensor(world, cam_gd, background)
        loss = ((rendered - Tensor(np.asarray(x_gd, dtype=model.dtype))) ** 2).mean()
        loss.backward()
        grad = s_leaf.grad[0] if s_leaf.grad is not None else np.zeros_like(s)
        zero_grads(params)
        trace.append(float(loss.data))
        s0 = s0_t.data[0]
        if not np.all(np.isfinite(grad)):
            warnings.warn(f"non-finite guidance gradient at substep {i}, applying zero strength", RuntimeWarning)
            s = ddim_step(schedule, s, s0, t, t_prev)
            continue
        eps = eps_from_x0(schedule, s, s0, t)
        eps_hat = eps + w * grad.astype(eps.dtype)
        s = ddim_step(schedule, s, s0, t, t_prev, eps_hat=eps_hat)
    raw = normalizer.denormalize(GaussianSet(s0.astype(np.float64)))
    return frame_to_world(raw, cam_src), trace


def gs_optimize(init: GaussianSet, views, steps: int, lr: float, background=None) -> GaussianSet:
    """Per-scene splat fitting: Adam on raw parameters against rendered MSE.

    `views` is a list of (image, camera) pairs. The splat count never
    changes (no densify/prune).
    """
    if not views:
        raise InvalidInputError("gs_optimize requires at least one view")
    if background is None:
        background = np.ones(3)
    from .nn.adam import AdamState, adam_step
    from .render import _backward as _render_backward, _forward as _render_forward

    param = Tensor(np.array(init.params, dtype=np.float64), requires_grad=True)
    adam = AdamState(lr=lr)
    n_px = None
    for _ in range(steps):
        grad = np.zeros_like(param.data)
        for img, cam in views:
            target = np.asarray(img, dtype=np.float64)
            out, cache = _render_forward(param.data, cam, background, want_cache=True)
            if n_px is None:
                n_px = target.size
            upstream = 2.0 * (out - target) / (n_px * len(views))
            grad += _render_backward(cache, param.data, cam, background, upstream)
        adam_step(adam, [param], [grad])
    return GaussianSet(param.data)
