import numpy as np
import pytest

from progrl import demos
from progrl import minirogue as mr


@pytest.fixture(scope="session")
def small_config():
    return mr.DungeonConfig()


@pytest.fixture(scope="session")
def small_dataset(small_config):
    return demos.generate_dataset(small_config, ["depth2", "score"], 6, seed=100)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
