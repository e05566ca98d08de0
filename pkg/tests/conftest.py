import os
import sys

# Bit-reproducibility and single-core timing; set before numpy loads BLAS.
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

sys.path.insert(0, os.path.dirname(__file__))

import pytest

_ACCEPTANCE_KEY = pytest.StashKey[list]()


class AcceptanceLog:
    def __init__(self, lines):
        self.lines = lines

    def report(self, number: int, passed: bool, detail: str) -> None:
        line = f"ACCEPTANCE {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        self.lines.append(line)
        print(line)


@pytest.fixture
def acceptance(request):
    return AcceptanceLog(request.config.stash.setdefault(_ACCEPTANCE_KEY, []))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
