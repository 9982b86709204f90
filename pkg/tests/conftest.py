import numpy as np
import pytest

from lanetraverse.autodiff.nn import ParamStore
from lanetraverse.data import collate, featurize
from lanetraverse.synth import generate_scene


@pytest.fixture(scope="session")
def instances():
    """A handful of featurized synthetic scenes, one per scenario kind where possible."""
    return [featurize(*generate_scene(3, i)) for i in range(8)]


@pytest.fixture(scope="session")
def batch(instances):
    return collate(instances[:4])


@pytest.fixture
def store():
    return ParamStore(np.random.default_rng(11))
