import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from faultsim.cnn import compile_model, load_idx, load_model
from faultsim.data import DIGITS_IMAGES, DIGITS_LABELS, LENET_SMALL

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# criterion name -> (passed, note)
ACCEPTANCE: dict = {}
NOTES: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name): acceptance criterion check")


def pytest_runtest_logreport(report):
    mark = getattr(report, "acceptance_name", None)
    if mark is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        ACCEPTANCE[mark] = report.outcome


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    m = item.get_closest_marker("acceptance")
    if m is not None:
        outcome.get_result().acceptance_name = m.args[0]


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name, outcome in ACCEPTANCE.items():
        status = "PASS" if outcome == "passed" else "FAIL"
        note = NOTES.get(name)
        tr.write_line(f"{status}  {name}" + (f"  [{note}]" if note else ""))


@pytest.fixture(scope="session")
def lenet():
    return load_model(LENET_SMALL)


@pytest.fixture(scope="session")
def lenet_cm(lenet):
    return compile_model(lenet)


@pytest.fixture(scope="session")
def digits():
    return load_idx(DIGITS_IMAGES, DIGITS_LABELS)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
