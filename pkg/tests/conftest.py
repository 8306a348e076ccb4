import numpy as np
import pytest

from halfspace_hjb.model import validate_model


@pytest.fixture(scope="session")
def bm1():
    return validate_model({"dim": 1, "a": [0.0], "lam": [1.0], "horizon": 1.0})


@pytest.fixture(scope="session")
def ou2():
    return validate_model({"dim": 2, "a": [0.0, -1.0], "lam": [1.0, 1.0], "horizon": 1.0})


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
