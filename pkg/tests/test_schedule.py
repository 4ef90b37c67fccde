import numpy as np
import pytest
from scipy import stats as scipy_stats

from splatdiff.errors import InvalidInputError
from splatdiff.schedule import (
    ddim_step, eps_from_x0, forward_noise, make_linear_schedule, sample_timestep,
    step_loss_weights, substep_grid,
)


@pytest.fixture(scope="module")
def default_schedule():
    return make_linear_schedule()  # T=100, beta 1e-4 -> 0.2, t* = 20


def test_default_schedule_shape(default_schedule):
    s = default_schedule
    assert s.T == 100 and s.t_star == 20
    assert s.beta(1) == pytest.approx(1e-4)
    assert s.beta(100) == pytest.approx(0.2)
    assert np.all(np.diff(s.betas) > 0)
    assert np.all((s.betas > 0) & (s.betas < 1))


def test_alpha_bar_first_and_last(default_schedule):
    s = default_schedule
    assert s.abar(0) == 1.0
    assert s.abar(1) == pytest.approx(1.0 - 1e-4, abs=0)
    # oracle: direct f64 product over the beta grid
    direct = np.prod([1.0 - b for b in np.linspace(1e-4, 0.2, 100)])
    assert s.abar(100) == pytest.approx(direct, rel=1e-14)
    assert s.abar(100) < 1e-4
    assert np.all(np.diff(s.alpha_bar) < 0)


def test_signal_noise_identity(default_schedule):
    for t in range(1, 101):
        a, b = default_schedule.signal_noise(t)
        assert abs(a * a + b * b - 1.0) < 1e-12


def test_invalid_bounds_rejected():
    with pytest.raises(InvalidInputError):
        make_linear_schedule(beta_start=0.3, beta_end=0.2)
    with pytest.raises(InvalidInputError):
        make_linear_schedule(beta_start=0.0)
    with pytest.raises(InvalidInputError):
        make_linear_schedule(t_star=100)
    with pytest.raises(InvalidInputError):
        make_linear_schedule(t_star=0)


def test_forward_noise_zero_eps(default_schedule, rng):
    s0 = rng.normal(size=(5, 14))
    out = forward_noise(default_schedule, s0, 37, np.zeros_like(s0))
    a, _ = default_schedule.signal_noise(37)
    np.testing.assert_allclose(out, a * s0, atol=0)


def test_forward_noise_t_range(default_schedule, rng):
    s0 = rng.normal(size=(2, 14))
    with pytest.raises(InvalidInputError):
        forward_noise(default_schedule, s0, 0, s0)
    with pytest.raises(InvalidInputError):
        forward_noise(default_schedule, s0, 101, s0)


def test_terminal_sample_is_nearly_pure_noise(default_schedule, rng):
    # bound derived from the computed schedule: sqrt(abar_T) ~ 3.7e-3
    s0 = rng.normal(size=(40, 14))
    s0 /= np.sqrt(np.mean(s0**2))  # unit scale
    eps = rng.normal(size=s0.shape)
    s_T = forward_noise(default_schedule, s0, 100, eps)
    rel = np.linalg.norm(s_T - eps) / np.linalg.norm(eps)
    assert rel < 0.02


def test_forward_noise_monte_carlo_variance(default_schedule):
    # oracle: var of s_t with s0 = 0 is (1 - abar_t); 3 sigma of the chi^2 spread
    rng = np.random.default_rng(99)
    t = 45
    n = 10_000
    eps = rng.normal(size=(n, 4))
    s_t = forward_noise(default_schedule, np.zeros((n, 4)), t, eps)
    var = s_t.var()
    expect = 1.0 - default_schedule.abar(t)
    tol = 3.0 * expect * np.sqrt(2.0 / (n * 4 - 1))
    assert abs(var - expect) < tol


def test_eps_recovery(default_schedule, rng):
    s0 = rng.normal(size=(6, 14))
    for t in (1, 20, 57, 100):
        eps = rng.normal(size=s0.shape)
        s_t = forward_noise(default_schedule, s0, t, eps)
        rec = eps_from_x0(default_schedule, s_t, s0, t)
        assert np.abs(rec - eps).max() < 1e-10


def test_eps_from_x0_renoising_identity(default_schedule, rng):
    s_t = rng.normal(size=(3, 14))
    s0_hat = rng.normal(size=(3, 14))
    for t in (5, 60, 100):
        eps = eps_from_x0(default_schedule, s_t, s0_hat, t)
        a, b = default_schedule.signal_noise(t)
        np.testing.assert_allclose(a * s0_hat + b * eps, s_t, atol=1e-12)


def test_eps_trivial_case(default_schedule, rng):
    s_t = rng.normal(size=(2, 14))
    a, _ = default_schedule.signal_noise(33)
    eps = eps_from_x0(default_schedule, s_t, s_t / a, 33)
    assert np.abs(eps).max() < 1e-10


def test_eps_at_terminal_with_zero_prediction(default_schedule, rng):
    s_t = rng.normal(size=(2, 14))
    eps = eps_from_x0(default_schedule, s_t, np.zeros_like(s_t), 100)
    _, b = default_schedule.signal_noise(100)
    np.testing.assert_allclose(eps, s_t / b, atol=1e-15)
    assert np.abs(eps - s_t).max() < 1e-4  # b differs from 1 by ~7e-6


def test_ddim_to_zero_returns_prediction(default_schedule, rng):
    s_t = rng.normal(size=(4, 14))
    s0_hat = rng.normal(size=(4, 14))
    out = ddim_step(default_schedule, s_t, s0_hat, 10, 0)
    np.testing.assert_array_equal(out, s0_hat)


def test_ddim_requires_monotone_steps(default_schedule, rng):
    s = rng.normal(size=(1, 14))
    with pytest.raises(InvalidInputError):
        ddim_step(default_schedule, s, s, 10, 10)
    with pytest.raises(InvalidInputError):
        ddim_step(default_schedule, s, s, 10, 11)


def test_ddim_constant_prediction_is_forward_noise_with_implied_eps(default_schedule, rng):
    # oracle: with a fixed prediction the chain keeps one implied noise vector
    s0_hat = rng.normal(size=(3, 14))
    s = forward_noise(default_schedule, s0_hat * 0.5, 100, rng.normal(size=s0_hat.shape))
    implied = eps_from_x0(default_schedule, s, s0_hat, 100)
    grid = substep_grid(100, 10)
    for t, t_prev in zip(grid[:-1], grid[1:]):
        s = ddim_step(default_schedule, s, s0_hat, t, t_prev)
        if t_prev > 0:
            expected = forward_noise(default_schedule, s0_hat, t_prev, implied)
            np.testing.assert_allclose(s, expected, atol=1e-12)
    np.testing.assert_allclose(s, s0_hat, atol=1e-12)


def test_frozen_denoiser_chain_step_count_invariant(default_schedule, rng):
    # input-independent prediction: 10-substep and 100-substep chains agree
    s0_hat = rng.normal(size=(2, 14))
    start = rng.normal(size=(2, 14))

    def run(n_steps):
        s = start.copy()
        grid = substep_grid(100, n_steps)
        for t, t_prev in zip(grid[:-1], grid[1:]):
            s = ddim_step(default_schedule, s, s0_hat, t, t_prev)
        return s

    np.testing.assert_allclose(run(10), run(100), atol=1e-12)


def test_ddim_override_matches_default_bitwise(default_schedule, rng):
    s_t = rng.normal(size=(3, 14))
    s0_hat = rng.normal(size=(3, 14))
    eps = eps_from_x0(default_schedule, s_t, s0_hat, 80)
    a = ddim_step(default_schedule, s_t, s0_hat, 80, 40)
    b = ddim_step(default_schedule, s_t, s0_hat, 80, 40, eps_hat=eps)
    np.testing.assert_array_equal(a, b)


def test_timestep_policies(default_schedule):
    rng = np.random.default_rng(3)
    draws = [sample_timestep(default_schedule, "above_t_star", rng) for _ in range(2000)]
    assert min(draws) >= 21 and max(draws) <= 100

    sched2 = make_linear_schedule(T=100, t_star=99)
    draws2 = {sample_timestep(sched2, "above_t_star", rng) for _ in range(50)}
    assert draws2 == {100}

    with pytest.raises(InvalidInputError):
        sample_timestep(default_schedule, "bogus", rng)


def test_uniform_policy_chi_square(default_schedule):
    rng = np.random.default_rng(12)
    n = 100_000
    draws = np.array([sample_timestep(default_schedule, "uniform_full", rng) for _ in range(n)])
    assert draws.min() >= 1 and draws.max() <= 100
    counts = np.bincount(draws, minlength=101)[1:]
    stat, pvalue = scipy_stats.chisquare(counts)
    assert pvalue > 0.01


def test_substep_grid_properties():
    assert substep_grid(100, 10) == [100, 90, 80, 70, 60, 50, 40, 30, 20, 10, 0]
    assert substep_grid(21, 10) == [21, 19, 17, 15, 13, 10, 8, 6, 4, 2, 0]
    grid = substep_grid(5, 10)  # degenerate: fewer distinct levels than steps
    assert grid[0] == 5 and grid[-1] == 0
    assert all(a > b for a, b in zip(grid[:-1], grid[1:]))


def test_step_loss_weights():
    w = step_loss_weights(10, "late_heavy")
    assert w.sum() == pytest.approx(1.0)
    assert np.all(np.diff(w) > 0)  # later steps weighted higher
    u = step_loss_weights(4, "uniform")
    np.testing.assert_allclose(u, 0.25)
    with pytest.raises(InvalidInputError):
        step_loss_weights(4, "nope")
