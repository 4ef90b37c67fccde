import numpy as np
import pytest

from splatdiff.cameras import Camera, ring_camera
from splatdiff.splats import GaussianSet


def random_splats(rng: np.random.Generator, n: int, center_scale=0.4,
                  log_scale_mean=np.log(0.25)) -> GaussianSet:
    p = np.zeros((n, 14))
    p[:, 0:3] = rng.normal(0.0, center_scale, (n, 3))
    p[:, 3:6] = rng.normal(log_scale_mean, 0.3, (n, 3))
    p[:, 6:10] = rng.normal(size=(n, 4))
    p[:, 10] = rng.normal(1.0, 1.0, n)
    p[:, 11:14] = rng.normal(0.0, 1.0, (n, 3))
    return GaussianSet(p)


def small_camera(size: int = 16, focal: float = 18.0) -> Camera:
    return ring_camera(0.3, 0.3, 2.5, focal, size, size)


def central_difference(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Componentwise central finite differences of a scalar function."""
    x = np.array(x, dtype=np.float64)  # writable working copy
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
