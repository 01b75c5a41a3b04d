import numpy as np
import pytest

from adaptgs.scene import Camera, GaussianSet


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cam16():
    return Camera(16.0, 16.0, 7.5, 7.5, 16, 16)


def random_gaussians(rng, n, depth=(1.5, 2.5), spread=0.4, scale=(3.0, 12.0), degree=1):
    k = (degree + 1) ** 2
    mu = np.c_[rng.uniform(-spread, spread, (n, 2)), rng.uniform(*depth, n)]
    s = rng.uniform(*scale, (n, 3))
    r = rng.standard_normal((n, 4))
    r /= np.linalg.norm(r, axis=1, keepdims=True)
    a = rng.uniform(0.2, 0.9, n)
    sh = rng.standard_normal((n, 3, k)) * 0.3
    sh[:, :, 1:] = np.clip(sh[:, :, 1:], -np.abs(sh[:, :, :1]), np.abs(sh[:, :, :1]))
    return GaussianSet(mu, s, r, a, sh)
