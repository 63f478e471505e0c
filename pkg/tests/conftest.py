import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from patchedit import AnalyticLinearDenoiser, TinyConvDenoiser, make_cosine_schedule

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def sched50():
    return make_cosine_schedule(50)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def analytic(sched50):
    return AnalyticLinearDenoiser((1, 16, 16), sched50, mean=0.5, variance=0.05)


@pytest.fixture(scope="session")
def analytic3(sched50):
    return AnalyticLinearDenoiser((3, 16, 16), sched50, mean=0.5, variance=0.05)


@pytest.fixture(scope="session")
def tiny(sched50):
    return TinyConvDenoiser((3, 8, 8), sched50, seed=7)


# -- acceptance reporting ------------------------------------------------------

_CRITERIA = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call" and not (call.when == "setup" and call.excinfo):
        return
    number, title = marker.args
    ok = call.excinfo is None
    entry = _CRITERIA.setdefault(number, [title, True, []])
    entry[1] = entry[1] and ok
    entry[2].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, _ = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}")
