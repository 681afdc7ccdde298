import numpy as np
import pytest

from vidattack.models import ModelBundle
from vidattack.tensor import Shape

TINY_SHAPE = Shape(2, 8, 8, 3)


@pytest.fixture(scope="session")
def tiny_bundle():
    """Small model bundle shared by fast unit tests."""
    return ModelBundle.seeded(TINY_SHAPE, classes=4, conv_filters=12, feat_filters=4, seed=11)


@pytest.fixture(scope="session")
def desk_model_bundle():
    """The pinned desk-scale bundle (seed 7); built once per session."""
    from vidattack.harness import desk_bundle
    return desk_bundle(seed=7)


@pytest.fixture()
def tiny_video():
    rng = np.random.default_rng(5)
    return rng.random(TINY_SHAPE.as_tuple()).astype(np.float32)


def central_difference(f, x, index, step=1e-3):
    """Central finite-difference derivative of scalar f at one coordinate."""
    xp = np.asarray(x, dtype=np.float64).copy()
    xm = xp.copy()
    xp[index] += step
    xm[index] -= step
    return (f(xp) - f(xm)) / (2.0 * step)
