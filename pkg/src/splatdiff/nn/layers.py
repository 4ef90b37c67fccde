"""Parameterized layers on top of the autodiff engine."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import InvalidInputError
from .autodiff import Tensor


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear:
    def __init__(self, rng, in_dim: int, out_dim: int, dtype=np.float32, zero_init: bool = False):
        if zero_init:
            w = np.zeros((in_dim, out_dim), dtype=dtype)
        else:
            w = kaiming_uniform(rng, (in_dim, out_dim), fan_in=in_dim, dtype=dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def parameters(self):
        return [self.weight, self.bias]


class Conv2d:
    """Strided 2D convolution with explicit im2col forward and col2im backward."""

    def __init__(self, rng, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                 padding: int = 1, dtype=np.float32):
        fan_in = in_ch * kernel * kernel
        self.weight = Tensor(kaiming_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.padding = padding
        self.kernel = kernel

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self):
        return [self.weight, self.bias]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int, padding: int) -> Tensor:
    if x.data.ndim != 4:
        raise InvalidInputError("conv2d expects (B, C, H, W) input")
    kh = kw = weight.data.shape[2]
    b_, c, h, w = x.data.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise InvalidInputError(f"conv2d output would be empty for input {x.data.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out_data = np.einsum("bcijuv,ocuv->boij", windows, weight.data, optimize=True)
    out_data += bias.data[None, :, None, None]
    out = Tensor(out_data, parents=(x, weight, bias))

    if out._parents:
        def backward():
            g = out.grad
            bias.accumulate(g.sum(axis=(0, 2, 3)))
            weight.accumulate(np.einsum("bcijuv,boij->ocuv", windows, g, optimize=True))
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for u in range(kh):
                    for v in range(kw):
                        contrib = np.einsum("boij,oc->bcij", g, weight.data[:, :, u, v], optimize=True)
                        gxp[:, :, u:u + oh * stride:stride, v:v + ow * stride:stride] += contrib
                x.accumulate(gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp)

        out._backward = backward
    return out


def sinusoidal_embedding_table(n_steps: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Fixed (n_steps+1, dim) sin/cos table indexed by timestep."""
    if dim % 2 != 0:
        raise InvalidInputError("embedding dim must be even")
    half = dim // 2
    t = np.arange(n_steps + 1, dtype=np.float64)[:, None]
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)[None, :]
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)
