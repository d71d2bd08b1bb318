import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from stepspec.backends.simulated import SimulatedBackend
from stepspec.simlab import (
    DEFAULT_BASE_SPEC,
    DEFAULT_JUDGE_SPEC,
    DEFAULT_SMALL_SPEC,
    make_tasks,
)


@pytest.fixture(scope="session")
def small_backend() -> SimulatedBackend:
    return SimulatedBackend(DEFAULT_SMALL_SPEC, seed=0)


@pytest.fixture(scope="session")
def base_backend() -> SimulatedBackend:
    return SimulatedBackend(DEFAULT_BASE_SPEC, judge_spec=DEFAULT_JUDGE_SPEC, seed=0)


@pytest.fixture(scope="session")
def tasks():
    return make_tasks(20, 12, seed=7)
