import numpy as np
import pytest

from gmce import solver
from gmce.environments import ThreePathConfig, build_three_path

# Every Policy built anywhere in the session is checked for normalization;
# the acceptance suite reads the running maximum at the end.
NORMALIZATION = {"count": 0, "max_error": 0.0}
_original_post_init = solver.Policy.__post_init__


def _recording_post_init(self):
    _original_post_init(self)
    NORMALIZATION["count"] += 1
    NORMALIZATION["max_error"] = max(NORMALIZATION["max_error"], self.normalization_error())


solver.Policy.__post_init__ = _recording_post_init

CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion n")


def pytest_collection_modifyitems(session, config, items):
    # acceptance tests last, so criterion 9 sees every policy of the session
    def key(item):
        marker = item.get_closest_marker("criterion")
        return (0, 0) if marker is None else (1, marker.args[0])

    items.sort(key=key)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, text = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        CRITERIA[n] = (text, "PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        text, status = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {text}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def ex2():
    return build_three_path(ThreePathConfig(2))



@pytest.fixture
def normalization_record():
    return NORMALIZATION
