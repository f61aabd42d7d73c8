import sys

import numpy as np
import pytest

from magstar.geometry import MagneticForm


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def linear_B():
    return MagneticForm.from_B("1 + q1/2 - q2/3")


@pytest.fixture
def ramp_field():
    """Time-dependent field ``F_12 = -t`` with the electric field that closes it."""
    return MagneticForm(2, [[0, "-t"], ["t", 0]], E=["q2", 0])


def pytest_terminal_summary(terminalreporter):
    mod = next((m for name, m in list(sys.modules.items()) if name.endswith("test_acceptance")), None)
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
