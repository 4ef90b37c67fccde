"""Adam optimizer with bias correction."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeMismatchError


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def ensure_buffers(self, params):
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        if len(self.m) != len(params):
            raise ShapeMismatchError("optimizer buffers do not match parameter list")


def adam_step(state: AdamState, params, grads=None) -> bool:
    """One Adam update over a parameter list. Returns False if skipped.

    A non-finite gradient anywhere skips the whole step (counter untouched)
    with a warning rather than corrupting the moments.
    """
    state.ensure_buffers(params)
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    for g, p in zip(grads, params):
        if g.shape != p.data.shape:
            raise ShapeMismatchError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
    if not all(np.all(np.isfinite(g)) for g in grads):
        warnings.warn("non-finite gradient, skipping optimizer step", RuntimeWarning)
        return False
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p.data = p.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return True
