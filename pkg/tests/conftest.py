import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture
def rng():
    return np.random.default_rng(20240521)


# ------------------------------------------------------------ acceptance reporting

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and not report.failed):
        return
    n, title = marker.args
    details = [str(v) for k, v in item.user_properties if k == "detail"]
    # several tests may share a criterion; it passes only if all of them do
    _, ok, prev = _CRITERIA.get(n, (title, True, []))
    _CRITERIA[n] = (title, ok and report.passed, prev + details)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, details = _CRITERIA[n]
        line = f"criterion {n} {'PASS' if ok else 'FAIL'}: {title}"
        terminalreporter.write_line(line + (f" ({'; '.join(details)})" if details else ""))
