import numpy as np
import pytest

from kslab.basis import SpectralBasis
from kslab.sde import SystemCoefficients
from kslab.weights import SourceWeightParams


@pytest.fixture
def basis8():
    return SpectralBasis(8)


@pytest.fixture
def noisy():
    return SystemCoefficients(b1=0.1, b2=0.05, b3=0.1)


@pytest.fixture
def quiet():
    return SystemCoefficients()


@pytest.fixture
def weights():
    return SourceWeightParams()


def decaying_data(n):
    c = 1.0 / np.arange(1, n + 1) ** 2
    return np.concatenate([c, c])


# acceptance lines, echoed in the terminal summary so they survive capture
ACCEPTANCE_LINES = []


@pytest.fixture
def report_criterion():
    def report(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
