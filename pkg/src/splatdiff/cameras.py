"""Pinhole cameras: world-to-camera pose, projection, unprojection, pose rigs.

Conventions: camera looks along +z in its own frame, u = fx*x/z + cx indexes
columns, v = fy*y/z + cy indexes rows, and pixel (i, j) samples the point
(u, v) = (j + 0.5, i + 0.5).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .splats import rotation_to_quat

NEAR_PLANE = 0.01


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray     # (3, 3) world-to-camera
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        R = np.ascontiguousarray(np.asarray(self.rotation, dtype=np.float64))
        t = np.ascontiguousarray(np.asarray(self.translation, dtype=np.float64))
        if R.shape != (3, 3) or t.shape != (3,):
            raise InvalidInputError(f"camera pose shapes invalid: R {R.shape}, t {t.shape}")
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError("focal lengths must be positive")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-6:
            raise InvalidInputError("camera rotation is not orthonormal within 1e-6")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return (points - self.translation) @ self.rotation

    def project(self, points: np.ndarray):
        """World points (N, 3) -> pixel coords (N, 2) and camera-space depth (N,)."""
        pc = self.world_to_camera(np.atleast_2d(points))
        z = pc[:, 2]
        uv = np.stack([self.fx * pc[:, 0] / z + self.cx, self.fy * pc[:, 1] / z + self.cy], axis=1)
        return uv, z

    def unproject(self, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """Pixel coords (N, 2) at z-depth (N,) -> world points (N, 3)."""
        uv = np.atleast_2d(uv)
        depth = np.atleast_1d(depth)
        d = np.stack(
            [(uv[:, 0] - self.cx) / self.fx, (uv[:, 1] - self.cy) / self.fy, np.ones(len(uv))],
            axis=1,
        )
        return self.camera_to_world(d * depth[:, None])

    @property
    def quat(self) -> np.ndarray:
        """World-to-camera rotation as a unit quaternion (w >= 0)."""
        return rotation_to_quat(self.rotation)

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
            "rotation": [float(x) for x in self.rotation.reshape(-1)],
            "translation": [float(x) for x in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
            width=d["width"], height=d["height"],
            rotation=np.array(d["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.array(d["translation"], dtype=np.float64),
        )


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera (R, t) for a camera at `eye` looking at `target`.

    `up` is the world direction that should appear upward in the image.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z = target - eye
    nz = np.linalg.norm(z)
    if nz < 1e-12:
        raise InvalidInputError("look_at eye and target coincide")
    z = z / nz
    x = np.cross(z, up)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise InvalidInputError("look_at view direction is parallel to up")
    x = x / nx
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=0)
    t = -R @ eye
    return R, t


def ring_camera(azimuth: float, elevation: float, radius: float,
                fx: float, width: int, height: int) -> Camera:
    """Camera on a sphere around the origin, looking at the origin."""
    eye = radius * np.array(
        [np.cos(elevation) * np.cos(azimuth), np.cos(elevation) * np.sin(azimuth), np.sin(elevation)]
    )
    R, t = look_at(eye)
    return Camera(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0,
                  width=width, height=height, rotation=R, translation=t)


def save_camera_file(path, cameras: list[Camera], roles: list[str], extra: dict | None = None) -> None:
    """Structured-text camera file: intrinsics, pose, and per-view role."""
    doc = {"views": [dict(cam.to_dict(), role=role) for cam, role in zip(cameras, roles)]}
    if extra:
        doc.update(extra)
    from .ioutil import atomic_write_text

    atomic_write_text(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_camera_file(path) -> tuple[list[Camera], list[str], dict]:
    with open(path) as f:
        doc = json.load(f)
    cams = [Camera.from_dict(v) for v in doc["views"]]
    roles = [v["role"] for v in doc["views"]]
    extra = {k: v for k, v in doc.items() if k != "views"}
    return cams, roles, extra
