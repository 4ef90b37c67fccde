"""Procedural toy multi-view dataset: blob scenes with ground-truth splats.

Each scene samples 20-60 Gaussian blobs arranged into a simple convex shape,
renders a 16-pose camera rig around it, and designates one source view,
k target (supervision) views, and held-out eval views (one of which doubles
as the optional guidance view). Everything is deterministic per seed, and
stored renders are reproducible bit-exactly from the stored splats because
splat parameters are quantized to f32 before rendering.

On-disk layout per scene:
    <root>/<split>/<scene_id>/gt.splt
    <root>/<split>/<scene_id>/view_<i>.imgf   (lossless f32)
    <root>/<split>/<scene_id>/view_<i>.ppm    (preview)
    <root>/<split>/<scene_id>/cameras.json    (intrinsics, poses, roles)
    <root>/<split>/<scene_id>/meta.json
"""

from __future__ import annotations

import json
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cameras import Camera, load_camera_file, ring_camera, save_camera_file
from .errors import DataError, InvalidInputError
from .images import load_imgf, save_imgf, save_ppm
from .ioutil import atomic_write_text
from .render import render
from .splats import CENTER, COLOR, D, GaussianSet, LOG_SCALE, OPACITY, QUAT, load_splats, save_splats


@dataclass(frozen=True)
class DatasetSpec:
    image_size: int = 64
    n_train: int = 256
    n_val: int = 32
    n_poses: int = 16
    k_targets: int = 3
    min_splats: int = 20
    max_splats: int = 60
    camera_radius: float = 2.5
    fov_deg: float = 50.0
    background: tuple = (1.0, 1.0, 1.0)

    @property
    def focal(self) -> float:
        return self.image_size / (2.0 * np.tan(np.deg2rad(self.fov_deg) / 2.0))


@dataclass
class SceneSample:
    scene_id: str
    cameras: list
    roles: list
    images: list            # (H, W, 3) f32 arrays, aligned with cameras
    source_index: int
    target_indices: list
    eval_indices: list
    guidance_index: int
    gt: GaussianSet | None = None
    path: Path | None = None

    @property
    def source_camera(self) -> Camera:
        return self.cameras[self.source_index]

    @property
    def source_image(self) -> np.ndarray:
        return self.images[self.source_index]


def _sample_scene_splats(rng: np.random.Generator, spec: DatasetSpec) -> GaussianSet:
    n = int(rng.integers(spec.min_splats, spec.max_splats + 1))
    shape_kind = rng.choice(["sphere", "ellipsoid", "box"])
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    if shape_kind == "sphere":
        centers = 0.85 * dirs
    elif shape_kind == "ellipsoid":
        axes = rng.uniform(0.35, 1.0, size=3)
        centers = 0.85 * dirs * axes
    else:
        centers = rng.uniform(-0.65, 0.65, size=(n, 3))

    params = np.zeros((n, D))
    params[:, CENTER] = centers
    params[:, LOG_SCALE] = rng.normal(np.log(0.16), 0.25, size=(n, 3))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    params[:, QUAT] = quats
    params[:, OPACITY] = rng.normal(1.5, 0.75, size=n)

    palette = rng.normal(0.0, 1.6, size=(int(rng.integers(2, 4)), 3))
    picks = rng.integers(0, len(palette), size=n)
    params[:, COLOR] = palette[picks] + rng.normal(0.0, 0.3, size=(n, 3))

    # quantize so stored f32 splats re-render bit-exactly
    return GaussianSet(params.astype("<f4").astype(np.float64))


def _scene_cameras(rng: np.random.Generator, spec: DatasetSpec) -> list[Camera]:
    cams = []
    jitter = 2.0 * np.pi / spec.n_poses
    for i in range(spec.n_poses):
        az = 2.0 * np.pi * i / spec.n_poses + rng.uniform(-0.25, 0.25) * jitter
        el = rng.uniform(np.deg2rad(-5.0), np.deg2rad(40.0))
        cams.append(ring_camera(az, el, spec.camera_radius, spec.focal, spec.image_size, spec.image_size))
    return cams


def _generate_scene(root: Path, split: str, index: int, seed: int, spec: DatasetSpec) -> str:
    scene_id = f"scene_{index:04d}"
    split_code = zlib.crc32(split.encode("utf-8"))
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, split_code, index)))
    splats = _sample_scene_splats(rng, spec)
    cams = _scene_cameras(rng, spec)

    order = rng.permutation(spec.n_poses)
    source = int(order[0])
    targets = [int(i) for i in order[1:1 + spec.k_targets]]
    evals = [int(i) for i in order[1 + spec.k_targets:]]
    guidance = int(evals[0])
    roles = ["eval"] * spec.n_poses
    roles[source] = "source"
    for t in targets:
        roles[t] = "target"

    sdir = root / split / scene_id
    sdir.mkdir(parents=True, exist_ok=True)
    save_splats(sdir / "gt.splt", splats)
    bg = np.asarray(spec.background)
    for i, cam in enumerate(cams):
        img = render(splats, cam, bg).values
        save_imgf(sdir / f"view_{i:02d}.imgf", img)
        save_ppm(sdir / f"view_{i:02d}.ppm", img)
    save_camera_file(sdir / "cameras.json", cams, roles, extra={"guidance_view": guidance})
    atomic_write_text(
        sdir / "meta.json",
        json.dumps({"scene_id": scene_id, "n_splats": splats.count, "seed": seed, "index": index},
                   sort_keys=True) + "\n",
    )
    return scene_id


def generate_dataset(root, seed: int, spec: DatasetSpec | None = None, threads: int = 1) -> dict:
    """Write the full train/val tree; returns the manifest dict."""
    spec = spec or DatasetSpec()
    root = Path(root)
    jobs = [("train", i) for i in range(spec.n_train)] + [("val", i) for i in range(spec.n_val)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda sp: _generate_scene(root, sp[0], sp[1], seed, spec), jobs))
    else:
        for split, i in jobs:
            _generate_scene(root, split, i, seed, spec)
    manifest = {
        "version": 1,
        "seed": seed,
        "image_size": spec.image_size,
        "n_poses": spec.n_poses,
        "k_targets": spec.k_targets,
        "background": list(spec.background),
        "splits": {"train": spec.n_train, "val": spec.n_val},
    }
    atomic_write_text(root / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def load_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise DataError(f"no dataset manifest at {path}")
    with open(path) as f:
        return json.load(f)


def load_scene(sdir: Path, with_gt: bool = True) -> SceneSample:
    cams, roles, extra = load_camera_file(sdir / "cameras.json")
    images = [load_imgf(sdir / f"view_{i:02d}.imgf").astype(np.float32) for i in range(len(cams))]
    source = roles.index("source")
    targets = [i for i, r in enumerate(roles) if r == "target"]
    evals = [i for i, r in enumerate(roles) if r == "eval"]
    if not targets:
        raise DataError(f"scene {sdir} has no target views")
    return SceneSample(
        scene_id=sdir.name,
        cameras=cams,
        roles=roles,
        images=images,
        source_index=source,
        target_indices=targets,
        eval_indices=evals,
        guidance_index=int(extra.get("guidance_view", evals[0])),
        gt=load_splats(sdir / "gt.splt") if with_gt and (sdir / "gt.splt").exists() else None,
        path=sdir,
    )


def load_split(root, split: str, limit: int | None = None, with_gt: bool = True) -> list[SceneSample]:
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise DataError(f"missing dataset split: {split_dir}")
    sdirs = sorted(p for p in split_dir.iterdir() if p.is_dir())
    if not sdirs:
        raise DataError(f"empty dataset split: {split_dir}")
    if limit is not None:
        sdirs = sdirs[:limit]
    return [load_scene(s, with_gt=with_gt) for s in sdirs]
