import numpy as np
import pytest

from splatdiff.cameras import Camera
from splatdiff.errors import ShapeMismatchError
from splatdiff.render import (
    ALPHA_CUTOFF, ALPHA_MAX, DILATION, RenderGradients, _forward, render, render_vjp,
)
from splatdiff.splats import GaussianSet
from conftest import central_difference, random_splats, small_camera


def axis_camera(size=17, focal=20.0):
    """Identity-pose camera looking down +z with the principal point on a pixel center."""
    c = size / 2.0
    return Camera(fx=focal, fy=focal, cx=c, cy=c, width=size, height=size,
                  rotation=np.eye(3), translation=np.zeros(3))


def one_splat(center, scale, opacity_logit, color_logit):
    p = np.zeros((1, 14))
    p[0, 0:3] = center
    p[0, 3:6] = np.log(scale)
    p[0, 6] = 1.0
    p[0, 10] = opacity_logit
    p[0, 11:14] = color_logit
    return GaussianSet(p)


def single_splat_oracle(cam, depth, scale, opacity, color, background):
    """Closed-form compositing of one isotropic on-axis Gaussian, with dilation."""
    sigma2 = (cam.fx * scale / depth) ** 2 + DILATION
    img = np.empty((cam.height, cam.width, 3))
    for i in range(cam.height):
        for j in range(cam.width):
            r2 = (j + 0.5 - cam.cx) ** 2 + (i + 0.5 - cam.cy) ** 2
            a = opacity * np.exp(-0.5 * r2 / sigma2)
            a = min(a, ALPHA_MAX)
            if a < ALPHA_CUTOFF:
                a = 0.0
            img[i, j] = a * color + (1 - a) * background
    return img


def test_empty_set_renders_background():
    cam = small_camera()
    bg = np.array([0.2, 0.5, 0.9])
    img = render(GaussianSet(np.zeros((0, 14))), cam, bg)
    np.testing.assert_array_equal(img.values, np.broadcast_to(bg, (16, 16, 3)))


def test_single_splat_matches_closed_form():
    cam = axis_camera()
    depth, scale = 2.0, 0.12
    logit = 25.0  # opacity ~ 1
    color_logit = np.array([3.0, -1.0, 0.5])
    splats = one_splat((0, 0, depth), scale, logit, color_logit)
    bg = np.array([1.0, 1.0, 1.0])
    img = render(splats, cam, bg).values

    opacity = 1.0 / (1.0 + np.exp(-logit))
    color = 1.0 / (1.0 + np.exp(-color_logit))
    oracle = single_splat_oracle(cam, depth, scale, opacity, color, bg)
    np.testing.assert_allclose(img, oracle, atol=1e-12)

    # peak pixel sits on the optical axis; alpha clamps at 0.999 there
    peak = img[8, 8]
    np.testing.assert_allclose(peak, 0.999 * color + 0.001 * bg, atol=1e-12)


def test_two_splats_composite_and_order_invariance():
    cam = axis_camera()
    bg = np.zeros(3)
    front = one_splat((0, 0, 1.5), 0.1, 0.5, np.array([2.0, 0.0, 0.0]))
    back = one_splat((0, 0, 3.0), 0.2, 1.0, np.array([-2.0, 1.0, 0.0]))
    both = GaussianSet(np.vstack([front.params, back.params]))
    swapped = GaussianSet(np.vstack([back.params, front.params]))

    img = render(both, cam, bg).values
    img_swapped = render(swapped, cam, bg).values
    np.testing.assert_array_equal(img, img_swapped)

    # oracle: composite the two single-splat alpha fields front to back
    def fields(splat, depth):
        dec = splat.decode()
        sigma2 = (cam.fx * dec.scales[0, 0] / depth) ** 2 + DILATION
        ys, xs = np.mgrid[0:17, 0:17]
        r2 = (xs + 0.5 - cam.cx) ** 2 + (ys + 0.5 - cam.cy) ** 2
        a = dec.opacities[0] * np.exp(-0.5 * r2 / sigma2)
        a = np.minimum(a, ALPHA_MAX)
        a[a < ALPHA_CUTOFF] = 0.0
        return a, dec.colors[0]

    af, cf = fields(front, 1.5)
    ab, cb = fields(back, 3.0)
    expected = af[:, :, None] * cf + ((1 - af) * ab)[:, :, None] * cb \
        + ((1 - af) * (1 - ab))[:, :, None] * bg
    np.testing.assert_allclose(img, expected, atol=1e-12)


def test_render_is_pure_and_permutation_invariant(rng):
    cam = small_camera()
    splats = random_splats(rng, 6)
    a = render(splats, cam).values
    b = render(splats, cam).values
    np.testing.assert_array_equal(a, b)
    perm = rng.permutation(6)
    c = render(GaussianSet(splats.params[perm]), cam).values
    np.testing.assert_array_equal(a, c)


def test_transmittance_monotone_and_weights_bounded(rng):
    cam = small_camera()
    splats = random_splats(rng, 8, log_scale_mean=np.log(0.4))
    _, cache = _forward(splats.params, cam, np.ones(3), want_cache=True)
    assert cache.ids.size > 0, "scene should be visible"
    alpha_raw = np.repeat(cache.vis_opac, np.diff(cache.offsets)) * cache.gauss
    alpha = np.where(alpha_raw >= 1e-12, np.minimum(alpha_raw, ALPHA_MAX), 0.0)
    assert np.all((alpha >= 0) & (alpha <= ALPHA_MAX))
    assert np.all((cache.t_pre >= 0) & (cache.t_pre <= 1))
    # transmittance never increases across a composite step
    assert np.all(cache.t_pre * (1 - alpha) <= cache.t_pre + 1e-15)
    assert np.all((cache.t_final >= 0) & (cache.t_final <= 1))


def test_zero_upstream_gives_zero_gradients(rng):
    cam = small_camera()
    splats = random_splats(rng, 5)
    g = render_vjp(splats, cam, np.ones(3), np.zeros((16, 16, 3)))
    assert isinstance(g, RenderGradients)
    np.testing.assert_array_equal(g.params, 0.0)


def test_vjp_matches_finite_differences(rng):
    cam = small_camera()
    splats = random_splats(rng, 4)
    bg = np.ones(3)
    upstream = rng.normal(size=(16, 16, 3))
    analytic = render_vjp(splats, cam, bg, upstream).params

    def f(params):
        img, _ = _forward(params, cam, bg, want_cache=False)
        return float(np.sum(img * upstream))

    fd = central_difference(f, splats.params, h=1e-4)
    rel = np.abs(analytic - fd) / np.maximum(1.0, np.abs(fd))
    assert rel.max() < 1e-5


def test_occluded_splat_has_near_zero_gradient():
    cam = axis_camera()
    rows = []
    # three blockers wide enough that alpha clamps at 0.999 across the whole
    # image: transmittance behind them is 1e-9 < 1e-6 everywhere
    for depth in (1.0, 1.2, 1.4):
        rows.append(one_splat((0, 0, depth), 15.0, 25.0, np.array([1.0, 1.0, 1.0])).params)
    rows.append(one_splat((0, 0, 2.5), 0.1, 2.0, np.array([-2.0, 0.0, 2.0])).params)
    splats = GaussianSet(np.vstack(rows))
    upstream = np.ones((17, 17, 3))
    g = render_vjp(splats, cam, np.zeros(3), upstream).params
    assert np.abs(g[3]).max() < 1e-6
    assert np.abs(g[0]).max() > 1e-3  # the front splat is very much alive


def test_splat_behind_camera_skipped_with_zero_grad():
    cam = axis_camera()
    behind = one_splat((0, 0, -1.0), 0.2, 2.0, np.array([0.0, 0.0, 0.0]))
    img = render(behind, cam, np.array([0.3, 0.3, 0.3])).values
    np.testing.assert_array_equal(img, np.broadcast_to(0.3, (17, 17, 3)))
    g = render_vjp(behind, cam, np.array([0.3, 0.3, 0.3]), np.ones((17, 17, 3))).params
    np.testing.assert_array_equal(g, 0.0)


def test_upstream_shape_checked():
    cam = small_camera()
    with pytest.raises(ShapeMismatchError):
        render_vjp(GaussianSet(np.zeros((0, 14))), cam, np.ones(3), np.zeros((4, 4, 3)))


def test_degenerate_projected_covariance_skipped():
    # enormous anisotropic scale drives the projected covariance condition number up
    p = np.zeros((1, 14))
    p[0, 0:3] = (0, 0, 2.0)
    p[0, 3:6] = (12.0, -9.0, -9.0)
    p[0, 6] = 1.0
    p[0, 10] = 3.0
    cam = axis_camera()
    img = render(GaussianSet(p), cam, np.ones(3)).values
    np.testing.assert_array_equal(img, 1.0)
