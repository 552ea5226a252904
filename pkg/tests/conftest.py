import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): numbered acceptance criterion")
    config.stash[_ACCEPTANCE] = {}


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    marker = item.get_closest_marker("acceptance")
    if marker is not None and report.when != "teardown":
        n, title = marker.args
        results = item.config.stash[_ACCEPTANCE]
        prev_status, _, secs = results.get(n, ("PASS", title, 0.0))
        secs += report.duration
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        if report.when == "setup" and status == "PASS":
            status = prev_status
        elif prev_status == "FAIL":
            status = "FAIL"
        results[n] = (status, title, secs)
    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash[_ACCEPTANCE]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        status, title, secs = results[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {title}  ({secs:.1f} s)")
