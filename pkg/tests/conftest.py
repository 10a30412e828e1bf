import os

import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def float64(monkeypatch):
    """Run the model code in 64-bit mode."""
    monkeypatch.setenv("TOKENROT_PRECISION", "64")
    yield torch.float64


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[2])):
            terminalreporter.write_line(line)
