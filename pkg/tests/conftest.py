import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from skrefine import synth, toolchain

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def two_cpu_art():
    return toolchain.generate(synth.two_cpu_policy())


@pytest.fixture(scope="session")
def random_arts():
    return [toolchain.generate(synth.random_policy(np.random.default_rng(seed))) for seed in range(6)]
