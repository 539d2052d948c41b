import numpy as np
import pytest

from p2plab.fixtures import build_fixture
from p2plab.market.scenario import load_scenario


@pytest.fixture(scope="session")
def six_bus_dir(tmp_path_factory):
    return build_fixture("six_bus", tmp_path_factory.mktemp("six_bus"), seed=0)


@pytest.fixture(scope="session")
def six_bus(six_bus_dir):
    return load_scenario(six_bus_dir)


@pytest.fixture(scope="session")
def ieee141_dir(tmp_path_factory):
    return build_fixture("ieee141_like", tmp_path_factory.mktemp("ieee141"), seed=0, n_days=1)


@pytest.fixture(scope="session")
def ieee141(ieee141_dir):
    return load_scenario(ieee141_dir)


@pytest.fixture(scope="session")
def expert_library(six_bus):
    from p2plab.expert.pipeline import ExpertLibrary

    return ExpertLibrary(six_bus, cache_dir=None)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
