import numpy as np
import pytest

from dvgo.grid import Bbox3, DenseGrid


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_grid(rng, channels=1, dims=(4, 5, 3), lo=(-1.0, -0.5, 0.0), hi=(1.0, 1.5, 0.6)):
    values = rng.normal(size=(channels,) + tuple(dims))
    return DenseGrid(values, Bbox3(lo, hi))


def central_diff(f, x, h=1e-6):
    """Central finite differences of a scalar function over every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))
