"""Deterministic pixel-aligned splat predictor used as the frozen noisy teacher.

A conv stack maps the source image to a strided grid of splats, one per
grid cell: predicted depth (softplus) and a screen-space center offset are
unprojected along the cell's pixel ray into a world-space center; the
remaining channels are the raw splat parameters. Training minimizes the
rendering MSE against the source view and the k supervision views.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .cameras import Camera
from .errors import DataError, InvalidInputError, ShapeMismatchError
from .images import RenderedImage
from .nn.adam import AdamState, adam_step
from .nn.autodiff import Tensor, concat, no_grad, zero_grads
from .nn.layers import Conv2d
from .render import render_tensor
from .splats import D, GaussianSet


@dataclass(frozen=True)
class TeacherConfig:
    image_size: int = 64
    stride: int = 4
    channels: tuple = (32, 64, 64)
    depth_bias: float = 2.0          # head bias init: softplus(2) ~ camera-ring distance
    log_scale_bias: float = -2.5     # head bias init: exp(-2.5) ~ 0.08 world units

    @property
    def grid_size(self) -> int:
        return self.image_size // self.stride

    @property
    def splat_count(self) -> int:
        return self.grid_size * self.grid_size


# head channel layout, prior to unprojection
_DEPTH = 0
_OFF = slice(1, 3)
_LS = slice(3, 6)
_QUAT = slice(6, 10)
_OPAC = 10
_COL = slice(11, 14)


class TeacherModel:
    def __init__(self, cfg: TeacherConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        c1, c2, c3 = cfg.channels
        self.conv1 = Conv2d(rng, 3, c1, stride=2, dtype=dtype)
        self.conv2 = Conv2d(rng, c1, c2, stride=2, dtype=dtype)
        self.conv3 = Conv2d(rng, c2, c3, stride=1, dtype=dtype)
        self.head = Conv2d(rng, c3, D, stride=1, dtype=dtype)
        self.head.weight.data = self.head.weight.data * 0.05
        bias = np.zeros(D, dtype=dtype)
        bias[_DEPTH] = cfg.depth_bias
        bias[_LS] = cfg.log_scale_bias
        bias[_QUAT.start] = 1.0  # near-identity rotation at init
        self.head.bias.data = bias
        g = cfg.grid_size
        centers = (np.arange(g) + 0.5) * cfg.stride
        self._grid_u = np.tile(centers, g).astype(dtype)[:, None]          # (N, 1)
        self._grid_v = np.repeat(centers, g).astype(dtype)[:, None]

    def layers(self):
        return [self.conv1, self.conv2, self.conv3, self.head]

    def parameters(self):
        return [p for layer in self.layers() for p in layer.parameters()]

    def named_parameters(self) -> dict:
        out = {}
        for name, layer in zip(["conv1", "conv2", "conv3", "head"], self.layers()):
            out[f"{name}.weight"] = layer.weight
            out[f"{name}.bias"] = layer.bias
        return out

    def load_blobs(self, blobs: dict) -> None:
        for name, param in self.named_parameters().items():
            if name not in blobs:
                raise InvalidInputError(f"checkpoint missing parameter {name}")
            arr = blobs[name].astype(self.dtype)
            if arr.shape != param.data.shape:
                raise ShapeMismatchError(f"parameter {name}: checkpoint {arr.shape} != model {param.data.shape}")
            param.data = arr

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False

    def images_to_tensor(self, images) -> Tensor:
        arrs = [im.values if isinstance(im, RenderedImage) else np.asarray(im) for im in images]
        batch = np.stack(arrs).transpose(0, 3, 1, 2).astype(self.dtype)
        return Tensor(batch)

    def _check_resolution(self, h, w):
        if h != self.cfg.image_size or w != self.cfg.image_size:
            raise ShapeMismatchError(f"teacher configured for {self.cfg.image_size}px input, got {h}x{w}")

    def predict_grid(self, images: Tensor) -> Tensor:
        """(B, 3, H, W) -> (B, N, 14) raw head outputs in grid row-major order."""
        self._check_resolution(images.shape[2], images.shape[3])
        h = self.conv1(images).silu()
        h = self.conv2(h).silu()
        h = self.conv3(h).silu()
        out = self.head(h)  # (B, 14, g, g)
        b = out.shape[0]
        return out.reshape(b, D, self.cfg.splat_count).transpose((0, 2, 1))

    def lift(self, raw: Tensor, cam: Camera) -> Tensor:
        """Head outputs (N, 14) for one image -> world-frame raw splat params."""
        dtype = self.dtype
        depth = raw[:, _DEPTH:_DEPTH + 1].softplus()
        u = Tensor(self._grid_u) + raw[:, 1:2]
        v = Tensor(self._grid_v) + raw[:, 2:3]
        dx = (u - float(cam.cx)) * float(1.0 / cam.fx)
        dy = (v - float(cam.cy)) * float(1.0 / cam.fy)
        ones = Tensor(np.ones((raw.shape[0], 1), dtype=dtype))
        direction = concat([dx, dy, ones], axis=1)
        center_cam = direction * depth
        R = cam.rotation.astype(dtype)          # world->cam; rows are cam axes
        t = cam.translation.astype(dtype)
        center_world = (center_cam - Tensor(t)) @ Tensor(R)  # (p - t) @ R == R^T (p - t)
        return concat([center_world, raw[:, _LS], raw[:, _QUAT], raw[:, _OPAC:_OPAC + 1], raw[:, _COL]], axis=1)

    def predict_batch(self, images: Tensor, cameras) -> list[Tensor]:
        grid = self.predict_grid(images)
        return [self.lift(grid[b], cam) for b, cam in enumerate(cameras)]


def teacher_predict(model: TeacherModel, x: RenderedImage | np.ndarray, cam: Camera) -> GaussianSet:
    """Single-image convenience op: image + camera -> world-frame splat set."""
    with no_grad():
        images = model.images_to_tensor([x])
        params = model.predict_batch(images, [cam])[0]
    return GaussianSet(params.data.astype(np.float64))


def train_teacher(scenes, steps: int, batch_size: int, lr: float, seed: int,
                  cfg: TeacherConfig | None = None, background=None,
                  log_every: int = 50, on_log=None) -> tuple[TeacherModel, list]:
    """Fit a fresh teacher on SceneSamples by rendering-loss descent.

    Per sample the loss averages the pixel MSE over the source view and all
    target views. Returns the model and the loss history.
    """
    if not scenes:
        raise DataError("train_teacher requires a non-empty dataset")
    cfg = cfg or TeacherConfig(image_size=scenes[0].images[0].shape[0])
    if background is None:
        background = np.ones(3)
    ss = np.random.SeedSequence(seed)
    init_rng, data_rng = [np.random.default_rng(s) for s in ss.spawn(2)]
    model = TeacherModel(cfg, init_rng)
    params = model.parameters()
    adam = AdamState(lr=lr)
    history = []
    t0 = time.monotonic()
    for step in range(steps):
        idx = data_rng.choice(len(scenes), size=min(batch_size, len(scenes)), replace=False)
        batch = [scenes[i] for i in idx]
        images = model.images_to_tensor([s.source_image for s in batch])
        predicted = model.predict_batch(images, [s.source_camera for s in batch])
        losses = []
        for scene, pred in zip(batch, predicted):
            views = [scene.source_index] + list(scene.target_indices)
            view_losses = []
            for vi in views:
                rendered = render_tensor(pred, scene.cameras[vi], background)
                target = Tensor(scene.images[vi].astype(model.dtype))
                view_losses.append(((rendered - target) ** 2).mean())
            acc = view_losses[0]
            for vl in view_losses[1:]:
                acc = acc + vl
            losses.append(acc / float(len(views)))
        total = losses[0]
        for l in losses[1:]:
            total = total + l
        total = total / float(len(losses))
        if lr != 0.0:
            total.backward()
            adam_step(adam, params)
        zero_grads(params)
        history.append(float(total.data))
        if on_log is not None and (step % log_every == 0 or step == steps - 1):
            on_log(step, float(total.data), time.monotonic() - t0)
    return model, history
