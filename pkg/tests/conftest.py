import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "towerlab",
    deadline=None,
    derandomize=True,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "towerlab"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
