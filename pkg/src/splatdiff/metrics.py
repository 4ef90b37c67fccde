"""Image quality metrics (PSNR, single-scale SSIM) and dataset-level evaluation."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, ShapeMismatchError
from .ioutil import atomic_write_text

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass(frozen=True)
class MetricResult:
    psnr: float
    ssim: float


def _check_same_resolution(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for unit-max images, capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_resolution(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable correlation over fully-contained windows only."""
    rows = sliding_window_view(img, kernel.size, axis=1) @ kernel
    return sliding_window_view(rows, kernel.size, axis=0) @ kernel


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Single-scale SSIM on the channel-mean grayscale image.

    11x11 Gaussian window (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2, averaged
    over windows that fit entirely inside the image.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_resolution(a, b)
    ga = a.mean(axis=2) if a.ndim == 3 else a
    gb = b.mean(axis=2) if b.ndim == 3 else b
    if min(ga.shape) < SSIM_WINDOW:
        raise ShapeMismatchError(f"image smaller than the {SSIM_WINDOW}px SSIM window")
    k = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    mu_a = _filter_valid(ga, k)
    mu_b = _filter_valid(gb, k)
    var_a = _filter_valid(ga * ga, k) - mu_a**2
    var_b = _filter_valid(gb * gb, k) - mu_b**2
    cov = _filter_valid(ga * gb, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def evaluate(predict_fn, scenes, render_fn, out_csv=None, threads: int = 1,
             skip_view=None) -> dict:
    """Per-scene source-view and held-out-view metrics for a splat predictor.

    `predict_fn(scene) -> GaussianSet` produces world-frame splats;
    `render_fn(splats, camera) -> (H, W, 3)` rasterizes them. `skip_view`
    optionally maps a scene to a view index excluded from eval metrics
    (used when a view was consumed as guidance input).

    Returns {"rows": [...], "source": MetricResult, "novel": MetricResult}.
    """
    if not scenes:
        raise DataError("empty evaluation split")

    def eval_scene(scene):
        splats = predict_fn(scene)
        rows = []
        skipped = skip_view(scene) if skip_view is not None else None
        for idx in [scene.source_index] + list(scene.eval_indices):
            if skipped is not None and idx == skipped and idx != scene.source_index:
                continue
            img = render_fn(splats, scene.cameras[idx])
            ref = scene.images[idx]
            kind = "source" if idx == scene.source_index else "eval"
            rows.append((scene.scene_id, idx, kind, psnr(img, ref), ssim(img, ref)))
        return rows

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_scene = list(pool.map(eval_scene, scenes))
    else:
        per_scene = [eval_scene(s) for s in scenes]
    rows = [r for chunk in per_scene for r in chunk]

    def agg(kind):
        vals = [(p, s) for _, _, k, p, s in rows if k == kind]
        ps = float(np.mean([v[0] for v in vals]))
        ss = float(np.mean([v[1] for v in vals]))
        return MetricResult(psnr=ps, ssim=ss)

    result = {"rows": rows, "source": agg("source"), "novel": agg("eval")}
    if out_csv is not None:
        write_metric_csv(out_csv, rows, result)
    return result


def write_metric_csv(path, rows, result) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["scene", "view", "kind", "psnr", "ssim"])
    for scene_id, idx, kind, p, s in rows:
        writer.writerow([scene_id, idx, kind, repr(float(p)), repr(float(s))])
    writer.writerow(["mean", "", "source", repr(result["source"].psnr), repr(result["source"].ssim)])
    writer.writerow(["mean", "", "eval", repr(result["novel"].psnr), repr(result["novel"].ssim)])
    atomic_write_text(Path(path), buf.getvalue())
