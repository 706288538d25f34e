from __future__ import annotations

import numpy as np
import pytest

from gradguide.dataset import generate_subspace, random_basis
from gradguide.schedule import NoiseSchedule
from gradguide.score import fit_subspace

# acceptance lines collected during the run and echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def schedule():
    return NoiseSchedule.constant(1.0, 10.0)


@pytest.fixture(scope="session")
def subspace64():
    basis = random_basis(64, 16, 0)
    data = generate_subspace(basis, 5000, 1)
    return basis, data, fit_subspace(data)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
