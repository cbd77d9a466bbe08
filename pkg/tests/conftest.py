import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_design(rng, n, k, heavy=False):
    """Intercept plus ``k - 1`` random columns."""
    cols = rng.standard_t(2, (n, k - 1)) if heavy else rng.standard_normal((n, k - 1))
    return np.column_stack([np.ones(n), cols])


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
