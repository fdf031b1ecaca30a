import numpy as np
import pytest

from metaclust.graph import Graph


def pytest_addoption(parser):
    parser.addoption("--slow", action="store_true", default=False, help="run real-data checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--slow"):
        return
    skip = pytest.mark.skip(reason="needs --slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def barbell():
    """Two triangles {0,1,2} and {3,4,5} joined by the bridge 2-3."""
    return Graph.from_pairs(6, [(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5), (2, 3)])


@pytest.fixture
def triangle():
    return Graph.from_pairs(3, [(0, 1), (0, 2), (1, 2)])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
