import numpy as np
import pytest

from semadapt import autodiff as ad


@pytest.fixture
def f64():
    """Build tensors in float64 so central differences are not swamped by round-off."""
    with ad.default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def away_from_kinks(x: np.ndarray, margin: float = 0.05) -> np.ndarray:
    """Push entries off the relu / abs kink at 0 so finite differences stay one-sided-free."""
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


# criterion number -> one-line verdict, filled in by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
