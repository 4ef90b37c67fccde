"""Noise schedule, forward noising, and deterministic x0-parameterized stepping.

The schedule stores cumulative signal levels abar_t = prod_{u<=t} (1 - beta_u)
with abar_0 = 1, computed in float64. All stepping here is deterministic:
a step from t to t_prev re-noises the predicted clean sample with the noise
implied by the current state (or an explicit override).

Functions accept either numpy arrays or autodiff Tensors for the sample
arguments; everything is affine in them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError

DEFAULT_T = 100
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.2
DEFAULT_T_STAR = 20
DEFAULT_SAMPLE_STEPS = 10


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray       # (T,), betas[i] is beta_{i+1}
    alpha_bar: np.ndarray   # (T+1,), alpha_bar[0] = 1
    t_star: int

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def abar(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise InvalidInputError(f"timestep {t} outside [0, {self.T}]")
        return float(self.alpha_bar[t])

    def _check_t(self, t: int):
        if not 1 <= t <= self.T:
            raise InvalidInputError(f"timestep {t} outside [1, {self.T}]")

    def signal_noise(self, t: int) -> tuple[float, float]:
        """(sqrt(abar_t), sqrt(1 - abar_t))."""
        ab = self.abar(t)
        return float(np.sqrt(ab)), float(np.sqrt(1.0 - ab))


def make_linear_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA_START,
                         beta_end: float = DEFAULT_BETA_END, t_star: int = DEFAULT_T_STAR) -> NoiseSchedule:
    """Linear beta schedule inclusive of both endpoints, alpha_bar in f64."""
    if not (0.0 < beta_start < beta_end < 1.0):
        raise InvalidInputError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    if not (0 < t_star < T):
        raise InvalidInputError(f"need 0 < t_star < T, got t_star={t_star}, T={T}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    betas.flags.writeable = False
    alpha_bar.flags.writeable = False
    return NoiseSchedule(T=T, betas=betas, alpha_bar=alpha_bar, t_star=t_star)


def forward_noise(schedule: NoiseSchedule, s0, t: int, eps):
    """s_t = sqrt(abar_t) s0 + sqrt(1 - abar_t) eps, for 1 <= t <= T."""
    schedule._check_t(t)
    a, b = schedule.signal_noise(t)
    return a * s0 + b * eps


def eps_from_x0(schedule: NoiseSchedule, s_t, s0_hat, t: int):
    """Noise implied by a clean prediction: inverts forward_noise exactly."""
    schedule._check_t(t)
    a, b = schedule.signal_noise(t)
    return (s_t - a * s0_hat) / b


def ddim_step(schedule: NoiseSchedule, s_t, s0_hat, t: int, t_prev: int, eps_hat=None):
    """Deterministic step t -> t_prev; t_prev = 0 returns s0_hat exactly."""
    schedule._check_t(t)
    if not 0 <= t_prev < t:
        raise InvalidInputError(f"ddim step needs 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    if eps_hat is None:
        eps_hat = eps_from_x0(schedule, s_t, s0_hat, t)
    a, b = (1.0, 0.0) if t_prev == 0 else schedule.signal_noise(t_prev)
    if t_prev == 0:
        return a * s0_hat + 0.0 * eps_hat  # keeps graph connectivity without perturbing the value
    return a * s0_hat + b * eps_hat


def sample_timestep(schedule: NoiseSchedule, policy: str, rng: np.random.Generator) -> int:
    """Draw a training timestep: uniform over {1..T} or over {t*+1..T}."""
    if policy == "uniform_full":
        return int(rng.integers(1, schedule.T + 1))
    if policy == "above_t_star":
        return int(rng.integers(schedule.t_star + 1, schedule.T + 1))
    raise InvalidInputError(f"unknown timestep policy: {policy}")


def substep_grid(t_start: int, n_steps: int) -> list[int]:
    """Monotone grid of n_steps+1 timesteps from t_start down to 0."""
    if t_start < 1:
        raise InvalidInputError("grid must start at t >= 1")
    raw = [round(t_start * (1.0 - i / n_steps)) for i in range(n_steps + 1)]
    grid = [int(raw[0])]
    for v in raw[1:]:
        if int(v) < grid[-1]:
            grid.append(int(v))
    if grid[-1] != 0:
        grid.append(0)
    return grid


def step_loss_weights(n_steps: int, policy: str) -> np.ndarray:
    """Per-substep rendering-loss weights, normalized to sum 1.

    "late_heavy" upweights steps near the clean end of the chain (the last
    step gets the largest weight); "uniform" is the ablation setting.
    """
    if policy == "uniform":
        w = np.ones(n_steps, dtype=np.float64)
    elif policy == "late_heavy":
        w = 1.0 / np.arange(n_steps, 0, -1, dtype=np.float64)
    else:
        raise InvalidInputError(f"unknown loss weight policy: {policy}")
    return w / w.sum()
