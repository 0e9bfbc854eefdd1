"""Shared test plumbing: acceptance result registry and summary printing."""

from contextlib import contextmanager

ACCEPTANCE_RESULTS = {}


@contextmanager
def acceptance(name):
    """Record a PASS/FAIL line for one acceptance criterion.

    The body's assertions decide the verdict; failures re-raise so pytest
    still reports them normally.
    """
    try:
        yield
    except BaseException:
        ACCEPTANCE_RESULTS[name] = "FAIL"
        raise
    ACCEPTANCE_RESULTS[name] = "PASS"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"{name}: {ACCEPTANCE_RESULTS[name]}")
