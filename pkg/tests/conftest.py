import re

import pytest

CRITERIA = {}


@pytest.fixture
def criterion():
    """``record(n, ok, detail)``: remember one acceptance verdict and print it."""

    def record(n, ok, detail=""):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        CRITERIA[n] = line
        print(line, flush=True)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        line = CRITERIA[n]
        terminalreporter.write_line(line, red=bool(re.search(r": FAIL", line)), green=": PASS" in line)
