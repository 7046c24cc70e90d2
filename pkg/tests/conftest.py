import numpy as np
import pytest

# one "criterion N: PASS/FAIL ..." line per acceptance check, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def rs():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
