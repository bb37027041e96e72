import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from safeland.geometry import CameraIntrinsics, Transform

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_transform(rng, max_t=5.0):
    q = rng.normal(size=4)
    return Transform(q / np.linalg.norm(q), rng.uniform(-max_t, max_t, 3))


@st.composite
def transforms(draw, max_t=5.0):
    q = draw(st.lists(st.floats(-1, 1, allow_nan=False), min_size=4, max_size=4).filter(
        lambda v: np.linalg.norm(v) > 1e-3))
    t = draw(st.lists(st.floats(-max_t, max_t, allow_nan=False), min_size=3, max_size=3))
    return Transform(np.array(q), np.array(t))


@pytest.fixture
def K64():
    return CameraIntrinsics.centered(64, 64, 96.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one verdict line per acceptance criterion, printed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
