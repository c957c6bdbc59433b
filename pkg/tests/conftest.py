import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rownav.geometry import default_cameras
from rownav.world import VineyardLayout

settings.register_profile("rownav", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("rownav")


@pytest.fixture(scope="session")
def cameras():
    return default_cameras()


@pytest.fixture(scope="session")
def crt():
    return VineyardLayout.preset("CRT")


@pytest.fixture(scope="session")
def flat():
    return VineyardLayout.preset("RN", n_lanes=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def deg(x):
    return math.radians(x)
