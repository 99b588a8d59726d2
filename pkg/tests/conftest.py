import numpy as np
import pytest

from sdvmatch.evaluation import random_rotation


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def curved_support(rng, n, extent=0.5):
    """Points on a smooth curved sheet; generic enough that frames are
    well-conditioned almost surely."""
    xy = rng.uniform(-extent / 2, extent / 2, size=(n, 2))
    z = (0.3 * np.sin(3.0 * xy[:, 0]) * np.cos(2.0 * xy[:, 1])
         + 0.2 * xy[:, 0] ** 2 + 0.1 * xy[:, 1])
    return np.column_stack([xy, z])


def rotated_copy(rng, points):
    r = random_rotation(rng)
    return points @ r.T, r
