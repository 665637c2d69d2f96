"""Shared fixtures plus the acceptance summary printed after the run."""

import numpy as np
import pytest

from ringflow import ModelParams

# One line per acceptance check, appended by tests/test_acceptance.py and
# echoed verbatim at the end of the pytest run.
ACCEPTANCE_LINES = []


@pytest.fixture
def params():
    """Road constants used throughout: 30 m/s free flow, 7.5 m headway."""
    return ModelParams()


@pytest.fixture
def rng():
    return np.random.default_rng(20260816)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
