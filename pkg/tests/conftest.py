import numpy as np
import pytest
from hypothesis import settings

from scoremoco.ctrecon import FanBeamGeometry, PhantomSampler
from scoremoco.scorefield import NoiseSchedule

settings.register_profile("default", max_examples=25, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def geometry():
    return FanBeamGeometry()


@pytest.fixture(scope="session")
def schedule():
    return NoiseSchedule(0.01, 50.0)


@pytest.fixture(scope="session")
def sampler():
    return PhantomSampler(size=64, spacing=4.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
