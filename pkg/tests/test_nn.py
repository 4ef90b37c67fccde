import warnings

import numpy as np
import pytest

from splatdiff.errors import DigestMismatchError, InvalidInputError, ShapeMismatchError
from splatdiff.images import RenderedImage
from splatdiff.nn.adam import AdamState, adam_step
from splatdiff.nn.autodiff import Tensor, concat, no_grad, zero_grads
from splatdiff.nn.checkpoint import load_checkpoint, save_checkpoint
from splatdiff.nn.denoiser import DenoiserConfig, DenoiserModel, denoise
from splatdiff.nn.layers import Conv2d, Linear, conv2d, sinusoidal_embedding_table
from splatdiff.splats import GaussianSet
from conftest import central_difference


def fd_check(build_loss, leaves, h=1e-5, tol=1e-5):
    """Compare engine gradients of a scalar loss against central differences."""
    loss = build_loss()
    loss.backward()
    analytic = [leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data)
                for leaf in leaves]
    zero_grads(leaves)
    for leaf, grad in zip(leaves, analytic):
        def f(x, leaf=leaf):
            old = leaf.data
            leaf.data = x
            out = float(build_loss().data)
            leaf.data = old
            return out

        fd = central_difference(f, leaf.data, h=h)
        denom = np.maximum(1.0, np.abs(fd))
        assert (np.abs(grad - fd) / denom).max() < tol


def test_elementwise_ops_match_fd(rng):
    x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    y = Tensor(rng.normal(size=(4, 5)) + 3.0, requires_grad=True)

    fd_check(lambda: (x * y + x / y - y + 2.0 * x).sum(), [x, y])
    fd_check(lambda: (x.sigmoid() * y.softplus() + x.silu()).mean(), [x, y])
    fd_check(lambda: ((x**3) + (y**0.5)).sum(), [x, y])
    fd_check(lambda: (x.exp() + y.log() + y.sqrt()).sum(), [x, y])
    fd_check(lambda: (-x).sum() - (x - y).mean(), [x, y])


def test_matmul_reshape_transpose_concat_fd(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    fd_check(lambda: ((a @ b) ** 2).sum(), [a, b])

    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    fd_check(lambda: (x.reshape(6, 4).transpose((1, 0))[1:3, :] ** 2).sum(), [x])
    fd_check(lambda: concat([x, x * 2.0], axis=2).mean(), [x])
    fd_check(lambda: x.reshape(2, 3, 4, 1).expand((2, 3, 4, 5)).sum(), [x])
    fd_check(lambda: x.sum(axis=(1, 2)).mean() + x.mean(axis=0, keepdims=True).sum(), [x])


def test_broadcast_add_mul_fd(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4,)), requires_grad=True)
    fd_check(lambda: ((a + b) * b).sum(), [a, b])


def test_conv2d_matches_fd(rng):
    x = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
    layer = Conv2d(rng, 3, 4, kernel=3, stride=2, padding=1, dtype=np.float64)
    fd_check(lambda: (layer(x) ** 2).mean(), [x, layer.weight, layer.bias], tol=1e-5)


def test_loss_sum_of_params_gives_ones(rng):
    theta = Tensor(rng.normal(size=(7,)), requires_grad=True)
    loss = theta.sum()
    loss.backward()
    np.testing.assert_array_equal(theta.grad, np.ones(7))


def test_detached_branch_gets_zero_gradient(rng):
    x = Tensor(rng.normal(size=(3,)), requires_grad=True)
    y = x.detach()
    loss = (x * 2.0).sum() + (y * 100.0).sum()
    loss.backward()
    np.testing.assert_array_equal(x.grad, np.full(3, 2.0))


def test_no_grad_suppresses_recording(rng):
    x = Tensor(rng.normal(size=(3,)), requires_grad=True)
    with no_grad():
        y = (x * 3.0).sum()
    assert y._parents == () and not y.requires_grad


def test_backward_requires_scalar(rng):
    x = Tensor(rng.normal(size=(3,)), requires_grad=True)
    with pytest.raises(InvalidInputError):
        (x * 2.0).backward()


def test_cycle_in_graph_rejected(rng):
    x = Tensor(rng.normal(size=(1,)), requires_grad=True)
    y = x * 2.0
    y._parents = (y,)  # deliberately corrupt the DAG
    with pytest.raises(InvalidInputError):
        y.backward()


def test_composed_mlp_matches_fd(rng):
    w1 = Linear(rng, 5, 8, dtype=np.float64)
    w2 = Linear(rng, 8, 3, dtype=np.float64)
    x = Tensor(rng.normal(size=(4, 5)))

    def loss():
        return (w2(w1(x).silu()).sigmoid() ** 2).mean()

    fd_check(loss, [w1.weight, w1.bias, w2.weight, w2.bias])


def test_sinusoidal_table_shape_and_range():
    table = sinusoidal_embedding_table(100, 64)
    assert table.shape == (101, 64)
    assert np.abs(table).max() <= 1.0
    assert not np.allclose(table[3], table[57])


# -- adam -----------------------------------------------------------------------


def test_adam_zero_gradient_keeps_params(rng):
    p = Tensor(rng.normal(size=(4,)), requires_grad=True)
    before = p.data.copy()
    state = AdamState(lr=0.1)
    assert adam_step(state, [p], [np.zeros(4)])
    np.testing.assert_array_equal(p.data, before)
    assert state.step_count == 1


def test_adam_constant_gradient_limit(rng):
    # oracle: with constant gradient g, bias-corrected update -> lr * g/|g|
    p = Tensor(np.zeros(3), requires_grad=True)
    state = AdamState(lr=1e-3)
    g = np.array([2.5, -0.3, 1e-2])
    prev = p.data.copy()
    for _ in range(500):
        prev = p.data.copy()
        adam_step(state, [p], [g.copy()])
    step = np.abs(p.data - prev)
    np.testing.assert_allclose(step, 1e-3, rtol=1e-4)


def test_adam_defaults_match_convention():
    state = AdamState(lr=1e-3)
    assert state.beta1 == 0.9 and state.beta2 == 0.999


def test_adam_skips_non_finite(rng):
    p = Tensor(rng.normal(size=(2,)), requires_grad=True)
    before = p.data.copy()
    state = AdamState(lr=0.1)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ok = adam_step(state, [p], [np.array([np.nan, 1.0])])
    assert not ok
    assert state.step_count == 0
    np.testing.assert_array_equal(p.data, before)
    assert any("non-finite" in str(w.message) for w in caught)


# -- denoiser ---------------------------------------------------------------------


def micro_model(rng, dtype=np.float64):
    cfg = DenoiserConfig(image_size=8, stride=4, enc_channels=(4, 6), global_dim=8,
                         time_dim=8, hidden_dim=16, hidden_layers=2, total_steps=100)
    return DenoiserModel(cfg, rng, dtype=dtype)


def test_denoiser_identity_at_init(rng):
    model = micro_model(rng)
    x = rng.uniform(0, 1, (8, 8, 3))
    s_t = rng.normal(size=(2, 14))
    out = denoise(model, GaussianSet(s_t), 42, RenderedImage(values=x, background=np.ones(3)))
    np.testing.assert_allclose(out.params, s_t, atol=1e-12)


def test_denoiser_is_pure(rng):
    model = micro_model(rng)
    model.head.weight.data = rng.normal(0, 0.1, model.head.weight.data.shape)
    x = RenderedImage(values=rng.uniform(0, 1, (8, 8, 3)), background=np.ones(3))
    s_t = GaussianSet(rng.normal(size=(3, 14)))
    a = denoise(model, s_t, 7, x)
    b = denoise(model, s_t, 7, x)
    np.testing.assert_array_equal(a.params, b.params)


def test_denoiser_resolution_mismatch(rng):
    model = micro_model(rng)
    bad = RenderedImage(values=rng.uniform(0, 1, (16, 16, 3)), background=np.ones(3))
    with pytest.raises(ShapeMismatchError):
        denoise(model, GaussianSet(rng.normal(size=(2, 14))), 5, bad)


def test_denoiser_timestep_range(rng):
    model = micro_model(rng)
    x = RenderedImage(values=rng.uniform(0, 1, (8, 8, 3)), background=np.ones(3))
    with pytest.raises(InvalidInputError):
        denoise(model, GaussianSet(rng.normal(size=(2, 14))), 101, x)


def test_denoiser_parameter_gradients_match_fd(rng):
    model = micro_model(rng)
    model.head.weight.data = rng.normal(0, 0.05, model.head.weight.data.shape)
    x_src = rng.uniform(0, 1, (8, 8, 3))
    s_t = rng.normal(size=(1, 2, 14))
    target = rng.normal(size=(2, 14))

    def loss():
        encoded = model.encode(model.images_to_tensor([x_src]))
        shat = model.predict_x0(Tensor(s_t), np.array([37]), encoded)
        return ((shat[0] - Tensor(target)) ** 2).mean()

    probe = [model.conv1.weight, model.conv2.bias, model.global_proj.weight,
             model.trunk[0].weight, model.head.weight, model.head.bias]
    fd_check(loss, probe, tol=1e-4)


def test_denoiser_gradient_wrt_noisy_input(rng):
    model = micro_model(rng)
    model.head.weight.data = rng.normal(0, 0.05, model.head.weight.data.shape)
    x_src = rng.uniform(0, 1, (8, 8, 3))
    leaf = Tensor(rng.normal(size=(1, 2, 14)), requires_grad=True)
    target = rng.normal(size=(2, 14))

    def loss():
        encoded = model.encode(model.images_to_tensor([x_src]))
        shat = model.predict_x0(leaf, np.array([55]), encoded)
        return ((shat[0] - Tensor(target)) ** 2).mean()

    fd_check(loss, [leaf], tol=1e-5)


# -- checkpoints --------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, rng):
    blobs = {"a.weight": rng.normal(size=(3, 4)).astype(np.float32),
             "b.bias": rng.normal(size=(5,)).astype(np.float32)}
    state = AdamState(lr=1e-3, step_count=7)
    state.m = [np.ones((3, 4), np.float32), np.zeros(5, np.float32)]
    state.v = [np.full((3, 4), 2.0, np.float32), np.ones(5, np.float32)]
    save_checkpoint(tmp_path / "m.ckpt", "digest123", blobs, adam=state)
    digest, loaded, adam = load_checkpoint(tmp_path / "m.ckpt")
    assert digest == "digest123"
    for k in blobs:
        np.testing.assert_array_equal(loaded[k], blobs[k])
    assert adam.step_count == 7 and adam.lr == 1e-3
    np.testing.assert_array_equal(adam.m[0], state.m[0])


def test_checkpoint_digest_mismatch(tmp_path, rng):
    save_checkpoint(tmp_path / "m.ckpt", "digest-a", {"x": np.zeros(2, np.float32)})
    with pytest.raises(DigestMismatchError):
        load_checkpoint(tmp_path / "m.ckpt", expect_digest="digest-b")


def test_checkpoint_missing_file(tmp_path):
    from splatdiff.errors import MissingArtifactError

    with pytest.raises(MissingArtifactError):
        load_checkpoint(tmp_path / "absent.ckpt")
