import time

import numpy as np
import pytest

from edgeopt import _kernels

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, text): acceptance criterion covered by the test")


@pytest.fixture(scope="session", autouse=True)
def jit_warm():
    """Compile the numba kernels once, outside any timed region."""
    t0 = time.perf_counter()
    _kernels.warmup()
    return time.perf_counter() - t0


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    num, text = mark.args
    prev = _ACCEPTANCE.get(num, (text, "PASS"))
    failed = rep.failed or (rep.when == "call" and rep.skipped)
    _ACCEPTANCE[num] = (text, "FAIL" if failed or prev[1] == "FAIL" else "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_ACCEPTANCE):
        text, status = _ACCEPTANCE[num]
        terminalreporter.write_line(f"[{status}] criterion {num}: {text}")
