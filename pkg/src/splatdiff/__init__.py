"""splatdiff: image-supervised diffusion training for 3D Gaussian splats.

A frozen feed-forward splat predictor acts as a noisy teacher supplying 3D
samples for diffusion training that is supervised purely by rendered 2D
views, with two-stage training (bootstrapping, then unrolled multi-step
denoising), cycle-consistency regularization, and additional-view guidance
at sampling time. Everything runs at desk scale on CPU with a differentiable
rasterizer and a bundled toy multi-view benchmark.
"""

__version__ = "0.1.0"

from .cameras import Camera, look_at, ring_camera
from .images import RenderedImage, load_imgf, save_imgf, save_ppm
from .metrics import MetricResult, evaluate, psnr, ssim
from .render import RenderGradients, render, render_tensor, render_vjp
from .schedule import (
    NoiseSchedule, ddim_step, eps_from_x0, forward_noise, make_linear_schedule,
    sample_timestep, step_loss_weights, substep_grid,
)
from .splats import DecodedSplats, GaussianSet, SplatNormalizer, load_splats, save_splats

__all__ = [
    "Camera", "look_at", "ring_camera",
    "RenderedImage", "load_imgf", "save_imgf", "save_ppm",
    "MetricResult", "evaluate", "psnr", "ssim",
    "RenderGradients", "render", "render_tensor", "render_vjp",
    "NoiseSchedule", "ddim_step", "eps_from_x0", "forward_noise",
    "make_linear_schedule", "sample_timestep", "step_loss_weights", "substep_grid",
    "DecodedSplats", "GaussianSet", "SplatNormalizer", "load_splats", "save_splats",
]
