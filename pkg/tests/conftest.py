from pathlib import Path

import pytest

DATA = Path(__file__).parent / "data"
_RESULTS = pytest.StashKey[list]()


@pytest.fixture
def data_dir():
    return DATA


def pytest_configure(config):
    config.stash[_RESULTS] = []
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criterion")


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per criterion; printed in the terminal summary."""
    lines = request.config.stash[_RESULTS]

    def report(label, passed, detail):
        line = f"{label}: {'PASS' if passed else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return passed
    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_RESULTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
