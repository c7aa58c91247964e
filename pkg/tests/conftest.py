import numpy as np
import pytest

from ensa.data import toy_cloud
from ensa.model import NsaConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy():
    """The 16-node line x = 0..15."""
    return toy_cloud(16)


@pytest.fixture
def toy_config():
    return NsaConfig(m=8, c=4, k=1, depth=1, hidden=16, heads=2, knn_k=2, seed=0)


def general_cloud(n, seed=0):
    from ensa.balltree import PointCloud

    pos = np.random.default_rng(seed).normal(size=(n, 3))
    return PointCloud(pos, pos.copy(), np.random.default_rng(seed + 1).normal(size=(n, 3)))
