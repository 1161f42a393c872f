import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from jointivim.case import normalize_case
from jointivim.phantom import PhantomSpec, make_phantom, simulate

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def static_phantom():
    case, gt = make_phantom(PhantomSpec(seed=0))
    return normalize_case(case), gt


@pytest.fixture(scope="session")
def small_static():
    case, gt = make_phantom(PhantomSpec(shape=(32, 32), seed=0))
    return normalize_case(case), gt


@pytest.fixture(scope="session")
def moving_phantom():
    case, gt = simulate(PhantomSpec(motion_px=4, snr=20, seed=0))
    return normalize_case(case), gt


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
