"""Gaussian splat sets: raw parameterization, decoding, normalization, file format.

A splat set is an N x 14 matrix. Per-splat layout (all unconstrained reals):

    [0:3]   center, world units
    [3:6]   log scale per principal axis
    [6:10]  rotation quaternion (w, x, y, z), renormalized on decode
    [10]    opacity logit
    [11:14] color, pre-sigmoid

Keeping every column unconstrained means adding Gaussian noise to a set
still decodes to a valid splat configuration.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, ShapeMismatchError, UnfittedNormalizerError

D = 14

CENTER = slice(0, 3)
LOG_SCALE = slice(3, 6)
QUAT = slice(6, 10)
OPACITY = 10
COLOR = slice(11, 14)

SPLT_MAGIC = b"SPLT"
SPLT_VERSION = 1


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (..., 4) wxyz -> rotation matrices (..., 3, 3)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(*q.shape[:-1], 3, 3)


def rotation_to_quat(R: np.ndarray) -> np.ndarray:
    """3x3 rotation matrix -> unit quaternion wxyz with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        if i == 0:
            s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
            q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
        elif i == 1:
            s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
            q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
        else:
            s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
            q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a (x) b, broadcasting over leading axes."""
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_left_multiply_matrix(q0: np.ndarray) -> np.ndarray:
    """4x4 matrix L so that L @ q == quat_multiply(q0, q)."""
    w, x, y, z = q0
    return np.array(
        [
            [w, -x, -y, -z],
            [x, w, -z, y],
            [y, z, w, -x],
            [z, -y, x, w],
        ]
    )


@dataclass(frozen=True)
class DecodedSplats:
    """Physical splat quantities decoded from raw parameters."""

    centers: np.ndarray      # (N, 3)
    rotations: np.ndarray    # (N, 3, 3)
    scales: np.ndarray       # (N, 3), strictly positive
    covariances: np.ndarray  # (N, 3, 3), R diag(s^2) R^T
    opacities: np.ndarray    # (N,), in (0, 1)
    colors: np.ndarray       # (N, 3), in (0, 1)


@dataclass(frozen=True)
class GaussianSet:
    """Immutable set of N splats in the raw 14-dim parameterization."""

    params: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.params)
        if p.ndim != 2 or p.shape[1] != D:
            raise ShapeMismatchError(f"splat params must be (N, {D}), got {p.shape}")
        p = np.ascontiguousarray(p)
        p.flags.writeable = False
        object.__setattr__(self, "params", p)

    @property
    def count(self) -> int:
        return self.params.shape[0]

    def decode(self, quat_tol: float = 1e-6) -> DecodedSplats:
        """Decode raw parameters into physical splats.

        Rejects non-finite input. The quaternion is renormalized; a norm
        below `quat_tol` has no usable direction and is rejected too.
        """
        p = self.params
        if not np.all(np.isfinite(p)):
            bad = np.argwhere(~np.isfinite(p))[0]
            raise InvalidInputError(f"non-finite splat parameter at splat {bad[0]}, column {bad[1]}")
        q = p[:, QUAT]
        norms = np.linalg.norm(q, axis=1)
        if np.any(norms < quat_tol):
            i = int(np.argmin(norms))
            raise InvalidInputError(f"degenerate quaternion (norm {norms[i]:.3g}) at splat {i}")
        q = q / norms[:, None]
        R = quat_to_rotation(q)
        scales = np.exp(p[:, LOG_SCALE])
        M = R * scales[:, None, :]  # R @ diag(s)
        cov = M @ np.swapaxes(M, 1, 2)
        return DecodedSplats(
            centers=p[:, CENTER].copy(),
            rotations=R,
            scales=scales,
            covariances=cov,
            opacities=sigmoid(p[:, OPACITY]),
            colors=sigmoid(p[:, COLOR]),
        )

    def transformed(self, rotation: np.ndarray, translation: np.ndarray) -> "GaussianSet":
        """Apply the rigid map x -> R x + t to every splat.

        Centers move, orientations compose, scales/opacity/color are
        invariant.
        """
        rotation = np.asarray(rotation, dtype=self.params.dtype)
        translation = np.asarray(translation, dtype=self.params.dtype)
        out = self.params.copy()
        out[:, CENTER] = self.params[:, CENTER] @ rotation.T + translation
        q_rot = rotation_to_quat(rotation).astype(self.params.dtype)
        out[:, QUAT] = quat_multiply(q_rot[None, :], self.params[:, QUAT])
        return GaussianSet(out)


def canonicalize_quat_sign(params: np.ndarray) -> np.ndarray:
    """Flip each quaternion so w >= 0 (q and -q encode the same rotation)."""
    out = np.array(params, copy=True)
    flip = out[:, QUAT.start] < 0
    out[flip, QUAT] = -out[flip, QUAT]
    return out


@dataclass
class SplatNormalizer:
    """Per-channel affine map between raw splat space and diffusion space.

    Fitted from a corpus of predicted splat sets so that the normalized
    corpus has zero mean, unit variance per channel. Quaternion signs are
    canonicalized (w >= 0) before statistics are computed and before every
    normalization, removing the q/-q bimodality from the diffusion target.
    """

    mean: np.ndarray | None = field(default=None)
    std: np.ndarray | None = field(default=None)

    STD_FLOOR = 1e-8  # guards against a pathologically constant channel

    @classmethod
    def fit(cls, sets) -> "SplatNormalizer":
        stacked = np.concatenate(
            [canonicalize_quat_sign(np.asarray(s.params if isinstance(s, GaussianSet) else s, dtype=np.float64)) for s in sets],
            axis=0,
        )
        mean = stacked.mean(axis=0)
        std = stacked.std(axis=0)
        std = np.maximum(std, cls.STD_FLOOR)
        return cls(mean=mean, std=std)

    def _require_fitted(self):
        if self.mean is None or self.std is None:
            raise UnfittedNormalizerError("normalizer has not been fitted")

    def normalize(self, s: GaussianSet) -> GaussianSet:
        self._require_fitted()
        p = canonicalize_quat_sign(s.params)
        return GaussianSet((p - self.mean) / self.std)

    def denormalize(self, s: GaussianSet) -> GaussianSet:
        self._require_fitted()
        return GaussianSet(s.params * self.std + self.mean)

    def normalize_array(self, params: np.ndarray) -> np.ndarray:
        self._require_fitted()
        return (canonicalize_quat_sign(params) - self.mean) / self.std


def save_splats(path, s: GaussianSet) -> None:
    """Write the versioned binary container: SPLT, version, N, d, f32 LE data."""
    payload = struct.pack("<4sIII", SPLT_MAGIC, SPLT_VERSION, s.count, D)
    payload += np.ascontiguousarray(s.params, dtype="<f4").tobytes()
    from .ioutil import atomic_write_bytes

    atomic_write_bytes(path, payload)


def load_splats(path) -> GaussianSet:
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) < 16:
            raise InvalidInputError(f"truncated splat file: {path}")
        magic, version, n, d = struct.unpack("<4sIII", head)
        if magic != SPLT_MAGIC:
            raise InvalidInputError(f"bad magic in splat file: {path}")
        if version != SPLT_VERSION:
            raise InvalidInputError(f"unsupported splat file version {version}: {path}")
        if d != D:
            raise InvalidInputError(f"splat file has d={d}, expected {D}: {path}")
        data = np.frombuffer(f.read(4 * n * d), dtype="<f4")
    if data.size != n * d:
        raise InvalidInputError(f"truncated splat file payload: {path}")
    return GaussianSet(data.reshape(n, d).astype(np.float64))
