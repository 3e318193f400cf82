import numpy as np
import pytest

from flare.gradcheck import tiny_config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny():
    return tiny_config()


def central_diff(f, x, step=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + step
        up = f(x)
        x[i] = orig - step
        down = f(x)
        x[i] = orig
        g[i] = (up - down) / (2 * step)
    return g


def rel_err(a, n, floor=1e-12):
    a, n = np.asarray(a), np.asarray(n)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))
