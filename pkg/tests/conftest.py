import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from memgel import Sample, builtin_model  # noqa: E402

KERNELS = ("exponential-EL", "poisson-ET", "quadratic-CUE")

# one line per acceptance criterion, filled in by test_acceptance
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture
def data123():
    return Sample(np.array([1.0, 2.0, 3.0]))


@pytest.fixture
def mean_model():
    return builtin_model("mean")


@pytest.fixture
def mv_model():
    return builtin_model("mean-variance", sigma2=1.0, bounds=[[-1.0, 1.0]])
