import numpy as np
import pytest

from acceptance_log import RESULTS
from lipread.tensor import precision


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
