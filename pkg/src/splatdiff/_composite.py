"""JIT kernels for the rasterizer's per-pair sweeps.

The forward kernel walks splats in composite (depth) order, evaluating the
projected Gaussian at every pixel of the splat's footprint and compositing
immediately; the backward kernel replays the walk in reverse, maintaining
the suffix color (everything behind the current splat) and reducing
per-pair gradients to per-splat accumulators. Both are strictly sequential
by construction (per-pixel transmittance), which is exactly what makes them
kernels rather than numpy expressions.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def forward_sweep(x0, y0, nx, ny, offsets, u, v, a, b, c, opac, colors,
                  alpha_cutoff, alpha_max, width,
                  t_flat, c_flat, pix_idx, gauss, t_pre):  # pragma: no cover
    for k in range(offsets.shape[0] - 1):
        uk, vk = u[k], v[k]
        ak, bk, ck = a[k], b[k], c[k]
        ok = opac[k]
        c0, c1, c2 = colors[k, 0], colors[k, 1], colors[k, 2]
        p = offsets[k]
        for iy in range(ny[k]):
            yy = y0[k] + iy
            dv = yy + 0.5 - vk
            rowbase = yy * width
            for ix in range(nx[k]):
                xx = x0[k] + ix
                du = xx + 0.5 - uk
                q = ak * du * du + 2.0 * bk * du * dv + ck * dv * dv
                g = np.exp(-0.5 * q)
                araw = ok * g
                if araw >= alpha_cutoff:
                    al = araw if araw <= alpha_max else alpha_max
                else:
                    al = 0.0
                pi = rowbase + xx
                tw = t_flat[pi]
                pix_idx[p] = pi
                gauss[p] = g
                t_pre[p] = tw
                wa = tw * al
                c_flat[pi, 0] += wa * c0
                c_flat[pi, 1] += wa * c1
                c_flat[pi, 2] += wa * c2
                t_flat[pi] = tw * (1.0 - al)
                p += 1


@njit(cache=True)
def backward_sweep(offsets, pix_idx, gauss, t_pre, u, v, a, b, c, opac, colors,
                   alpha_cutoff, alpha_max, width,
                   up_flat, suffix,
                   g_u, g_v, g_sxx, g_syy, g_sxy, g_opac, g_color):  # pragma: no cover
    for k in range(offsets.shape[0] - 2, -1, -1):
        uk, vk = u[k], v[k]
        ak, bk, ck = a[k], b[k], c[k]
        ok = opac[k]
        c0, c1, c2 = colors[k, 0], colors[k, 1], colors[k, 2]
        acc_u = 0.0
        acc_v = 0.0
        acc_xx = 0.0
        acc_yy = 0.0
        acc_xy = 0.0
        acc_o = 0.0
        acc_c0 = 0.0
        acc_c1 = 0.0
        acc_c2 = 0.0
        for p in range(offsets[k], offsets[k + 1]):
            pi = pix_idx[p]
            g = gauss[p]
            tw = t_pre[p]
            araw = ok * g
            if araw >= alpha_cutoff:
                al = araw if araw <= alpha_max else alpha_max
            else:
                al = 0.0
            up0, up1, up2 = up_flat[pi, 0], up_flat[pi, 1], up_flat[pi, 2]
            wa = tw * al
            acc_c0 += up0 * wa
            acc_c1 += up1 * wa
            acc_c2 += up2 * wa
            inv = 1.0 - al
            d0 = tw * c0 - suffix[pi, 0] / inv
            d1 = tw * c1 - suffix[pi, 1] / inv
            d2 = tw * c2 - suffix[pi, 2] / inv
            suffix[pi, 0] += wa * c0
            suffix[pi, 1] += wa * c1
            suffix[pi, 2] += wa * c2
            if al == 0.0 or araw > alpha_max:
                continue  # masked or clamped pixels carry no alpha gradient
            g_al = up0 * d0 + up1 * d1 + up2 * d2
            acc_o += g_al * g
            gq = -0.5 * g * (g_al * ok)
            xx = pi % width
            yy = pi // width
            du = xx + 0.5 - uk
            dv = yy + 0.5 - vk
            acc_u -= gq * (2.0 * ak * du + 2.0 * bk * dv)
            acc_v -= gq * (2.0 * bk * du + 2.0 * ck * dv)
            acc_xx += gq * du * du
            acc_yy += gq * dv * dv
            acc_xy += gq * du * dv
        g_u[k] = acc_u
        g_v[k] = acc_v
        g_sxx[k] = acc_xx
        g_syy[k] = acc_yy
        g_sxy[k] = acc_xy
        g_opac[k] = acc_o
        g_color[k, 0] = acc_c0
        g_color[k, 1] = acc_c1
        g_color[k, 2] = acc_c2
