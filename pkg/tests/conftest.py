import time

import pytest

from losscal.cli import main

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for the terminal summary."""
    lines = request.config.stash[_LINES]

    def record(label, passed, detail):
        lines.append(f"{'PASS' if passed else 'FAIL'}  {label}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def reproduce_runs(tmp_path_factory):
    """The default pipeline, run twice with the same root seed."""
    runs = []
    for name in ("run-a", "run-b"):
        out = tmp_path_factory.mktemp(name)
        start = time.perf_counter()
        code = main(["reproduce-all", "--out", str(out)])
        runs.append({"dir": out, "code": code, "seconds": time.perf_counter() - start})
    return runs
