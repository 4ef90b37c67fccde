"""Differentiable CPU rasterizer for Gaussian splat sets.

Forward: project each splat's covariance to screen space with the local
affine (EWA) approximation, then alpha-composite front to back over a depth
sort. Backward: exact vector-Jacobian product with respect to all raw splat
parameters, replayed from per-pair transmittance values saved during the
forward pass.

All per-pixel Gaussian math is vectorized over a flat list of
(splat, pixel) pairs built in composite order; only the inherently
sequential transmittance update walks splat by splat. Computation follows
the input dtype (float64 for gradient checks, float32 in training).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._composite import backward_sweep, forward_sweep
from .cameras import NEAR_PLANE, Camera
from .images import RenderedImage
from .splats import COLOR, D, GaussianSet, LOG_SCALE, OPACITY, QUAT

ALPHA_MAX = 0.999    # per-pixel opacity clamp, keeps 1/(1-a) bounded
ALPHA_CUTOFF = 1e-12  # below this a splat does not touch the pixel
DILATION = 0.3       # isotropic screen-space covariance dilation, px^2
COND_MAX = 1e8       # projected covariance condition number above which a splat is skipped

# The culling radius is where alpha falls to the cutoff, so dropping a pixel
# from a splat's footprint changes the image by at most ~1e-12: finite
# difference probes (h = 1e-4) across footprint boundaries stay exact to
# ~1e-8 relative instead of blowing up on an O(cutoff / h) jump.
_LOG_CUTOFF = float(np.log(ALPHA_CUTOFF))


@dataclass(frozen=True)
class RenderGradients:
    """d(loss)/d(raw params), same (N, 14) layout as GaussianSet.params."""

    params: np.ndarray


class _ForwardCache:
    """Flat pair structure the backward pass replays, in composite order."""

    __slots__ = (
        "ids", "offsets", "pix_idx", "gauss", "t_pre", "t_final",
        "vis_u", "vis_v", "vis_a", "vis_b", "vis_c", "vis_opac", "vis_colors",
        "p_cam", "uv", "inv_cov2d", "cov_cam", "jac",
        "decoded_R", "decoded_s", "decoded_o", "decoded_c", "quat_raw",
    )


def _project(params: np.ndarray, cam: Camera):
    """Vectorized projection geometry for all splats.

    Returns decoded splats plus per-splat camera points, pixel means,
    projection Jacobians, 2D covariance inverses, culling radii, and a
    validity mask implementing the skip rules (behind near plane,
    degenerate projected covariance).
    """
    gs = GaussianSet(params)
    dec = gs.decode()
    dtype = params.dtype
    R_c = cam.rotation.astype(dtype)
    t_c = cam.translation.astype(dtype)
    p_cam = dec.centers.astype(dtype) @ R_c.T + t_c
    z = p_cam[:, 2]

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        u = cam.fx * p_cam[:, 0] / z + cam.cx
        v = cam.fy * p_cam[:, 1] / z + cam.cy

        cov_cam = np.einsum("ab,nbc,dc->nad", R_c, dec.covariances.astype(dtype), R_c, optimize=True)

        n = params.shape[0]
        jac = np.zeros((n, 2, 3), dtype=dtype)
        jac[:, 0, 0] = cam.fx / z
        jac[:, 0, 2] = -cam.fx * p_cam[:, 0] / z**2
        jac[:, 1, 1] = cam.fy / z
        jac[:, 1, 2] = -cam.fy * p_cam[:, 1] / z**2
        cov2d = np.einsum("nab,nbc,ndc->nad", jac, cov_cam, jac, optimize=True)
        cov2d[:, 0, 0] += DILATION
        cov2d[:, 1, 1] += DILATION

        a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
        det = a * c - b * b
        half_tr = 0.5 * (a + c)
        disc = np.sqrt(np.maximum((0.5 * (a - c)) ** 2 + b * b, 0.0))
        lam_max = half_tr + disc
        lam_min = half_tr - disc

        finite = np.isfinite(u) & np.isfinite(v) & np.isfinite(cov2d).all(axis=(1, 2))
        valid = (z > NEAR_PLANE) & finite & (det > 0) & (lam_min > 0)
        valid &= dec.opacities > ALPHA_CUTOFF
        with np.errstate(divide="ignore", invalid="ignore"):
            cond = np.where(lam_min > 0, lam_max / np.maximum(lam_min, 1e-300), np.inf)
        valid &= cond <= COND_MAX

        inv_cov2d = np.zeros_like(cov2d)
        safe_det = np.where(valid, det, 1.0)
        inv_cov2d[:, 0, 0] = c / safe_det
        inv_cov2d[:, 1, 1] = a / safe_det
        inv_cov2d[:, 0, 1] = -b / safe_det
        inv_cov2d[:, 1, 0] = -b / safe_det

        # footprint reaches exactly to the alpha cutoff contour
        reach2 = 2.0 * (np.log(np.maximum(dec.opacities, ALPHA_CUTOFF)) - _LOG_CUTOFF)
        radius = np.sqrt(np.maximum(reach2, 0.0) * np.maximum(lam_max, 0.0))

    return dec, p_cam, np.stack([u, v], axis=1), cov_cam, jac, inv_cov2d, radius, valid


def _footprints(uv, radius, valid, order, h, w):
    """Per-visible-splat bounding boxes and pair offsets, in composite order."""
    sel = order[valid[order]]
    if sel.size == 0:
        return None
    u, v = uv[sel, 0], uv[sel, 1]
    r = radius[sel]
    x0 = np.maximum(0, np.ceil(u - r - 0.5)).astype(np.int64)
    x1 = np.minimum(w - 1, np.floor(u + r - 0.5)).astype(np.int64)
    y0 = np.maximum(0, np.ceil(v - r - 0.5)).astype(np.int64)
    y1 = np.minimum(h - 1, np.floor(v + r - 0.5)).astype(np.int64)
    nx, ny = x1 - x0 + 1, y1 - y0 + 1
    keep = (nx > 0) & (ny > 0)
    if not keep.any():
        return None
    sel, x0, y0, nx, ny = sel[keep], x0[keep], y0[keep], nx[keep], ny[keep]
    offsets = np.concatenate([[0], np.cumsum(nx * ny)]).astype(np.int64)
    return sel, x0, y0, nx, ny, offsets


def _forward(params: np.ndarray, cam: Camera, background: np.ndarray, want_cache: bool):
    params = np.asarray(params)
    if params.dtype not in (np.float32, np.float64):
        params = params.astype(np.float64)
    dtype = params.dtype
    background = np.asarray(background, dtype=dtype)
    h, w = cam.height, cam.width

    cache = _ForwardCache() if want_cache else None
    foot = None
    n = params.shape[0]
    if n > 0:
        dec, p_cam, uv, cov_cam, jac, inv_cov2d, radius, valid = _project(params, cam)
        # exact depth sort, ties broken by splat index for determinism
        order = np.lexsort((np.arange(n), p_cam[:, 2]))
        foot = _footprints(uv, radius, valid, order, h, w)

    if foot is None:
        image = np.clip(np.broadcast_to(background, (h, w, 3)).copy(), 0.0, 1.0)
        if want_cache:
            cache.ids = np.zeros(0, dtype=np.int64)
            cache.t_final = np.ones((h, w), dtype=dtype)
        return image, cache

    ids, x0, y0, nx, ny, offsets = foot
    vis_u = np.ascontiguousarray(uv[ids, 0])
    vis_v = np.ascontiguousarray(uv[ids, 1])
    A = inv_cov2d[ids]
    vis_a = np.ascontiguousarray(A[:, 0, 0])
    vis_b = np.ascontiguousarray(A[:, 0, 1])
    vis_c = np.ascontiguousarray(A[:, 1, 1])
    vis_opac = np.ascontiguousarray(dec.opacities.astype(dtype)[ids])
    vis_colors = np.ascontiguousarray(dec.colors.astype(dtype)[ids])

    total = int(offsets[-1])
    pix_idx = np.empty(total, dtype=np.int64)
    gauss = np.empty(total, dtype=dtype)
    t_pre = np.empty(total, dtype=dtype)
    t_flat = np.ones(h * w, dtype=dtype)
    c_flat = np.zeros((h * w, 3), dtype=dtype)
    forward_sweep(x0, y0, nx, ny, offsets, vis_u, vis_v, vis_a, vis_b, vis_c,
                  vis_opac, vis_colors, ALPHA_CUTOFF, ALPHA_MAX, w,
                  t_flat, c_flat, pix_idx, gauss, t_pre)

    image = np.clip(c_flat + t_flat[:, None] * background, 0.0, 1.0).reshape(h, w, 3)

    if want_cache:
        cache.ids, cache.offsets, cache.pix_idx = ids, offsets, pix_idx
        cache.gauss, cache.t_pre = gauss, t_pre
        cache.t_final = t_flat.reshape(h, w)
        cache.vis_u, cache.vis_v = vis_u, vis_v
        cache.vis_a, cache.vis_b, cache.vis_c = vis_a, vis_b, vis_c
        cache.vis_opac, cache.vis_colors = vis_opac, vis_colors
        cache.p_cam, cache.uv, cache.inv_cov2d = p_cam, uv, inv_cov2d
        cache.cov_cam, cache.jac = cov_cam, jac
        cache.decoded_R, cache.decoded_s = dec.rotations, dec.scales
        cache.decoded_o, cache.decoded_c = dec.opacities, dec.colors
        cache.quat_raw = params[:, QUAT]
    return image, cache


def _quat_rotation_partials(q: np.ndarray) -> np.ndarray:
    """(4, 3, 3) partial derivatives of R(q) w.r.t. each unit-quaternion component."""
    return _quat_rotation_partials_batch(np.asarray(q)[None, :])[0]


def _quat_rotation_partials_batch(q: np.ndarray) -> np.ndarray:
    """(V, 4, 3, 3) partial derivatives of R(q) per unit quaternion row."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w)
    rows = [
        [zero, -z, y, z, zero, -x, -y, x, zero],
        [zero, y, z, y, -2 * x, -w, z, w, -2 * x],
        [-2 * y, x, w, x, zero, z, -w, z, -2 * y],
        [-2 * z, -w, x, w, -2 * z, y, x, y, zero],
    ]
    out = np.stack([np.stack(r, axis=-1) for r in rows], axis=1)
    return 2.0 * out.reshape(q.shape[0], 4, 3, 3)


def _backward(cache: _ForwardCache, params: np.ndarray, cam: Camera,
              background: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    params = np.asarray(params)
    dtype = params.dtype if params.dtype in (np.float32, np.float64) else np.dtype(np.float64)
    n = params.shape[0]
    grads = np.zeros((n, D), dtype=dtype)
    if cache.ids.size == 0:
        return grads
    upstream = np.asarray(upstream, dtype=dtype)
    background = np.asarray(background, dtype=dtype)

    ids, offsets = cache.ids, cache.offsets
    up_flat = np.ascontiguousarray(upstream.reshape(-1, 3))

    # Suffix composite color: contributions strictly behind the current splat;
    # dC/dalpha is the splat's own term minus the attenuation of that suffix.
    suffix = np.ascontiguousarray((cache.t_final.reshape(-1)[:, None] * background).astype(dtype))

    nvis = len(ids)
    g_u_vis = np.empty(nvis)
    g_v_vis = np.empty(nvis)
    sxx = np.empty(nvis)
    syy = np.empty(nvis)
    sxy = np.empty(nvis)
    g_opac_vis = np.empty(nvis)
    g_color_vis = np.empty((nvis, 3))
    backward_sweep(offsets, cache.pix_idx, cache.gauss, cache.t_pre,
                   cache.vis_u, cache.vis_v, cache.vis_a, cache.vis_b, cache.vis_c,
                   cache.vis_opac, cache.vis_colors, ALPHA_CUTOFF, ALPHA_MAX, cam.width,
                   up_flat, suffix,
                   g_u_vis, g_v_vis, sxx, syy, sxy, g_opac_vis, g_color_vis)

    g_cov2d_inv = np.empty((nvis, 2, 2), dtype=dtype)
    g_cov2d_inv[:, 0, 0] = sxx
    g_cov2d_inv[:, 1, 1] = syy
    g_cov2d_inv[:, 0, 1] = sxy
    g_cov2d_inv[:, 1, 0] = sxy

    # geometry chain, vectorized over visible splats
    A = cache.inv_cov2d[ids]
    g_cov2d = -np.einsum("nab,nbc,ncd->nad", A, g_cov2d_inv, A, optimize=True)
    jac = cache.jac[ids]
    cov_cam = cache.cov_cam[ids]
    g_jac = 2.0 * np.einsum("nab,nbc,ncd->nad", g_cov2d, jac, cov_cam, optimize=True)
    g_cov_cam = np.einsum("nba,nbc,ncd->nad", jac, g_cov2d, jac, optimize=True)
    R_c = cam.rotation.astype(dtype)
    g_cov_world = np.einsum("ba,nbc,cd->nad", R_c, g_cov_cam, R_c, optimize=True)

    R = cache.decoded_R.astype(dtype)[ids]
    s = cache.decoded_s.astype(dtype)[ids]
    M = R * s[:, None, :]
    g_M = 2.0 * np.einsum("nab,nbc->nac", g_cov_world, M)
    g_R = g_M * s[:, None, :]
    g_s = np.einsum("nak,nak->nk", R, g_M)
    grads[ids, LOG_SCALE] = g_s * s

    # screen-space chain back to the camera-space center
    p = cache.p_cam[ids]
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    fx, fy = cam.fx, cam.fy
    g_x = g_u_vis * fx / z - g_jac[:, 0, 2] * fx / z**2
    g_y = g_v_vis * fy / z - g_jac[:, 1, 2] * fy / z**2
    g_z = (
        -g_u_vis * fx * x / z**2
        - g_v_vis * fy * y / z**2
        - g_jac[:, 0, 0] * fx / z**2
        - g_jac[:, 1, 1] * fy / z**2
        + g_jac[:, 0, 2] * 2.0 * fx * x / z**3
        + g_jac[:, 1, 2] * 2.0 * fy * y / z**3
    )
    grads[ids, 0:3] = np.stack([g_x, g_y, g_z], axis=1) @ R_c

    # decode chain: sigmoids and the normalized quaternion
    o = cache.decoded_o.astype(dtype)[ids]
    grads[ids, OPACITY] = g_opac_vis * o * (1.0 - o)
    c = cache.decoded_c.astype(dtype)[ids]
    grads[ids, COLOR] = g_color_vis * c * (1.0 - c)

    q_raw = cache.quat_raw[ids].astype(np.float64)
    q_norm = np.linalg.norm(q_raw, axis=1)
    q_hat = q_raw / q_norm[:, None]
    partials = _quat_rotation_partials_batch(q_hat)  # (V, 4, 3, 3)
    g_qhat = np.einsum("nab,nkab->nk", g_R.astype(np.float64), partials, optimize=True)
    proj = (np.eye(4)[None, :, :] - q_hat[:, :, None] * q_hat[:, None, :]) / q_norm[:, None, None]
    grads[ids, QUAT] = np.einsum("nkj,nj->nk", proj, g_qhat, optimize=True)

    return grads


def render(splats: GaussianSet, cam: Camera, background=None) -> RenderedImage:
    """Rasterize a splat set from a camera over a solid background color."""
    if background is None:
        background = np.ones(3)
    image, _ = _forward(splats.params, cam, background, want_cache=False)
    return RenderedImage(values=image.astype(np.float64),
                         background=np.asarray(background, dtype=np.float64))


def render_vjp(splats: GaussianSet, cam: Camera, background, upstream: np.ndarray) -> RenderGradients:
    """Exact vector-Jacobian product of `render` at (splats, cam).

    `upstream` is an image-shaped cotangent. Splats skipped by the forward
    pass receive zero gradient.
    """
    if background is None:
        background = np.ones(3)
    upstream = np.asarray(upstream)
    if upstream.shape != (cam.height, cam.width, 3):
        from .errors import ShapeMismatchError

        raise ShapeMismatchError(
            f"upstream shape {upstream.shape} does not match image ({cam.height}, {cam.width}, 3)"
        )
    _, cache = _forward(splats.params, cam, np.asarray(background), want_cache=True)
    grads = _backward(cache, splats.params, cam, np.asarray(background), upstream)
    return RenderGradients(params=grads)


def render_tensor(params, cam: Camera, background=None):
    """Autodiff bridge: render raw params held in an engine Tensor.

    Forward runs the rasterizer once with caches; backward replays them
    through the hand-derived VJP.
    """
    from .nn.autodiff import Tensor, _grad_enabled

    if background is None:
        background = np.ones(3)
    background = np.asarray(background)
    if not isinstance(params, Tensor):
        params = Tensor(params)
    record = _grad_enabled() and params.requires_grad
    image, cache = _forward(params.data, cam, background, want_cache=record)
    out = Tensor(image, parents=(params,))

    if record:
        def backward():
            g = _backward(cache, params.data, cam, background, out.grad)
            params.accumulate(g)

        out._backward = backward
    return out
