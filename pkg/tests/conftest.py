import numpy as np
import pytest
from hypothesis import settings

from coopdet.backend import warmup

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session", autouse=True)
def _jit_warmup():
    # Compile the active backend once so timed tests measure work, not JIT.
    warmup()


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
