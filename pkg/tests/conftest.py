import functools

import pytest

from v2x_sentinel.fixture import load_fixture
from v2x_sentinel.metrics import simulate

# (criterion number, passed, detail) appended by test_acceptance.py
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")


@functools.lru_cache(maxsize=None)
def run_cached(name, *overrides, trace=True):
    """Run a bundled fixture once per argument set within the session."""
    return simulate(load_fixture(name, list(overrides), env={}), trace_enabled=trace)


@pytest.fixture
def run():
    return run_cached
