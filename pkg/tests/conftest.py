import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("phisd", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("phisd")

ACCEPTANCE_LINES = []


@pytest.fixture
def record_criterion():
    """Log one pass/fail line for an acceptance criterion."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(rng, n, cond=100.0):
    """Random SPD matrix with eigenvalues log-spaced in [1, cond]."""
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    d = np.geomspace(1.0, cond, n)
    return (Q * d) @ Q.T


def random_symmetric(rng, n, n_neg, gap=1e-2):
    """Symmetric matrix with exactly ``n_neg`` negative eigenvalues, all |lambda| >= gap."""
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    mags = gap + rng.exponential(1.0, n)
    lam = np.concatenate([-mags[:n_neg], mags[n_neg:]])
    return (Q * lam) @ Q.T
