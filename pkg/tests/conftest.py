import numpy as np
import pytest
from hypothesis import settings

from fedmr.data import Samples
from fedmr.model import ArchitectureSpec, LayeredModel

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def random_list(rng, K, shapes, scale=1.0):
    return [LayeredModel.from_arrays([scale * rng.standard_normal(s) for s in shapes]) for _ in range(K)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_arch():
    return ArchitectureSpec.from_sizes([2, 4, 3])


@pytest.fixture
def toy_batch(rng):
    X = rng.standard_normal((6, 2))
    y = np.array([0, 1, 2, 0, 1, 2])
    return Samples(X, y, 3)
