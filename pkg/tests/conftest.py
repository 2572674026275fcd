import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)



# one line per acceptance criterion, printed after the run
_CRITERIA = []


@pytest.fixture
def criterion():
    def record(number, name, passed, detail, seconds=None):
        timing = "" if seconds is None else f" [{seconds:.2f}s]"
        _CRITERIA.append(f"criterion {number} {'PASS' if passed else 'FAIL'}: {name}: {detail}{timing}")
        print(_CRITERIA[-1])
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
