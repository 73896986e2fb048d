import numpy as np
import pytest

from layersplat.core import Camera, GaussianLayer, look_at_camera
from layersplat.humanoid import make_test_humanoid
from layersplat.quaternions import normalize_quat


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def humanoid():
    return make_test_humanoid()


@pytest.fixture(scope="session")
def small_humanoid():
    return make_test_humanoid(n_theta=12, detail=7)


def random_layer(n, rng, label="whole", spread=0.3, scale_range=(0.05, 0.3),
                 opacity_range=(0.1, 0.95)):
    mu = rng.normal(0.0, spread, (n, 3))
    q = normalize_quat(rng.normal(0.0, 1.0, (n, 4)))
    s = rng.uniform(*scale_range, (n, 2))
    opacity = rng.uniform(*opacity_range, n)
    color = rng.uniform(0.0, 1.0, (n, 3))
    return GaussianLayer(label, mu, q, s, opacity, color)


def random_camera(rng, width=40, height=36, distance=2.5):
    az = rng.uniform(0, 2 * np.pi)
    el = rng.uniform(-0.9, 0.9)
    eye = distance * np.array([np.cos(el) * np.cos(az), np.sin(el),
                               np.cos(el) * np.sin(az)])
    f = 0.9 * min(width, height) * distance / 2.2
    return look_at_camera(eye, np.zeros(3), np.array([0.0, 1.0, 0.0]),
                          fx=f, fy=f, cx=width / 2, cy=height / 2,
                          width=width, height=height)


@pytest.fixture
def simple_camera():
    return look_at_camera(np.array([0.0, 0.0, -2.5]), np.zeros(3),
                          np.array([0.0, 1.0, 0.0]), fx=45.0, fy=45.0,
                          cx=16.0, cy=16.0, width=32, height=32)
