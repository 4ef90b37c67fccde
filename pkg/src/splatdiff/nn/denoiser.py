"""Conditioned splat denoiser: predicts clean splats directly from a noisy set.

Conditioning on the source image uses a strided conv encoder producing a
feature grid aligned with the pixel-aligned splat ordering (splat i reads
the feature at grid cell i), plus a pooled global vector. The per-splat
trunk is an MLP over [splat params | time embedding | global | aligned
feature]. The output head is zero-initialized with a residual passthrough,
so an untrained model is the identity on its splat input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidInputError, ShapeMismatchError
from ..images import RenderedImage
from ..splats import D, GaussianSet
from .autodiff import Tensor, concat, no_grad
from .layers import Conv2d, Linear, sinusoidal_embedding_table


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 64
    stride: int = 4          # image pixels per splat grid cell
    enc_channels: tuple = (32, 64)
    global_dim: int = 64
    time_dim: int = 64
    hidden_dim: int = 256
    hidden_layers: int = 4
    total_steps: int = 100
    residual_scale: float = 1.0

    @property
    def grid_size(self) -> int:
        return self.image_size // self.stride

    @property
    def grid_cells(self) -> int:
        return self.grid_size * self.grid_size


class DenoiserModel:
    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        c1, c2 = cfg.enc_channels
        self.conv1 = Conv2d(rng, 3, c1, kernel=3, stride=2, padding=1, dtype=dtype)
        self.conv2 = Conv2d(rng, c1, c2, kernel=3, stride=2, padding=1, dtype=dtype)
        self.global_proj = Linear(rng, c2, cfg.global_dim, dtype=dtype)
        in_dim = D + cfg.time_dim + cfg.global_dim + c2
        dims = [in_dim] + [cfg.hidden_dim] * cfg.hidden_layers
        self.trunk = [Linear(rng, a, b, dtype=dtype) for a, b in zip(dims[:-1], dims[1:])]
        self.head = Linear(rng, cfg.hidden_dim, D, dtype=dtype, zero_init=True)
        self.time_table = sinusoidal_embedding_table(cfg.total_steps, cfg.time_dim, dtype=dtype)

    def layers(self):
        return [self.conv1, self.conv2, self.global_proj, *self.trunk, self.head]

    def parameters(self):
        return [p for layer in self.layers() for p in layer.parameters()]

    def named_parameters(self) -> dict:
        names = ["conv1", "conv2", "global_proj"] + [f"trunk{i}" for i in range(len(self.trunk))] + ["head"]
        out = {}
        for name, layer in zip(names, self.layers()):
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

    # -- forward -------------------------------------------------------------

    def encode(self, images: Tensor):
        """(B, 3, H, W) -> per-cell feature map and pooled global vector."""
        if images.shape[2] != self.cfg.image_size or images.shape[3] != self.cfg.image_size:
            raise ShapeMismatchError(
                f"encoder configured for {self.cfg.image_size}px input, got {images.shape[2]}x{images.shape[3]}"
            )
        h1 = self.conv1(images).silu()
        fmap = self.conv2(h1).silu()  # (B, c2, g, g)
        pooled = fmap.mean(axis=(2, 3))
        glob = self.global_proj(pooled).silu()
        return fmap, glob

    def predict_x0(self, s_t: Tensor, t: np.ndarray, encoded) -> Tensor:
        """Denoise a (B, N, d) batch at per-sample integer timesteps."""
        fmap, glob = encoded
        b, n, d = s_t.shape
        if d != D:
            raise ShapeMismatchError(f"expected splat dim {D}, got {d}")
        cells = self.cfg.grid_cells
        if n > cells:
            raise ShapeMismatchError(f"{n} splats exceed the {cells}-cell conditioning grid")
        t = np.atleast_1d(np.asarray(t, dtype=np.int64))
        if t.shape[0] != b:
            raise ShapeMismatchError("need one timestep per batch element")
        if np.any((t < 0) | (t > self.cfg.total_steps)):
            raise InvalidInputError(f"timestep out of range [0, {self.cfg.total_steps}]")

        temb = np.repeat(self.time_table[t], n, axis=0)  # (B*N, time_dim), constant
        c2 = fmap.shape[1]
        pix = fmap.reshape(b, c2, cells).transpose((0, 2, 1))[:, :n, :].reshape(b * n, c2)
        glob_rows = glob.reshape(b, 1, self.cfg.global_dim).expand((b, n, self.cfg.global_dim)) \
            .reshape(b * n, self.cfg.global_dim)

        h = concat([s_t.reshape(b * n, d), Tensor(temb), glob_rows, pix], axis=1)
        for layer in self.trunk:
            h = layer(h).silu()
        delta = self.head(h).reshape(b, n, d)
        return s_t + float(self.cfg.residual_scale) * delta

    def images_to_tensor(self, images) -> Tensor:
        """Stack HxWx3 arrays into a constant (B, 3, H, W) tensor in model dtype."""
        arrs = [im.values if isinstance(im, RenderedImage) else np.asarray(im) for im in images]
        batch = np.stack(arrs).transpose(0, 3, 1, 2).astype(self.dtype)
        return Tensor(batch)


def denoise(model: DenoiserModel, s_t: GaussianSet, t: int, x_src: RenderedImage) -> GaussianSet:
    """Single-set convenience wrapper: normalized noisy splats -> predicted clean splats."""
    with no_grad():
        images = model.images_to_tensor([x_src])
        encoded = model.encode(images)
        s = Tensor(np.asarray(s_t.params, dtype=model.dtype)[None, :, :])
        out = model.predict_x0(s, np.array([t]), encoded)
    return GaussianSet(out.data[0].astype(np.float64))
