import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from acpc import core_math as cm

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def verify():
    with cm.precision("verify"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
