import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion.

    Usage: ``criterion(n, title, passed, detail)``; the test then asserts.
    """
    lines = ACCEPTANCE_LINES

    def note(number, title, passed, detail=""):
        lines[number] = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}  {detail}".rstrip()
        return passed

    return note


def pytest_runtest_logreport(report):
    # a criterion whose test crashed before reporting still gets a line
    name = report.nodeid.rpartition("::")[2]
    if "test_acceptance.py" in report.nodeid and name.startswith("test_c") and report.failed:
        number = int(name[6:8])
        ACCEPTANCE_LINES.setdefault(number, f"criterion {number:>2} FAIL  {name}  (error during {report.when})")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = ACCEPTANCE_LINES
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(lines):
        terminalreporter.write_line(lines[number])
