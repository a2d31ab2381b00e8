import numpy as np
import pytest
from scipy.ndimage import gaussian_filter


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


def smooth_volume(dims, seed, sigma=2.0):
    r = np.random.default_rng(seed)
    return gaussian_filter(r.standard_normal(dims), sigma, mode="nearest")


def smooth_field(dims, seed, sigma=3.0, amplitude=0.6):
    r = np.random.default_rng(seed)
    u = np.stack([gaussian_filter(r.standard_normal(dims), sigma, mode="nearest")
                  for _ in range(3)])
    peak = np.sqrt((u * u).sum(axis=0)).max()
    if peak > 0:
        u *= amplitude / peak
    return u
