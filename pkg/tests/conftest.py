import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_pd(rng, n, cond_floor=0.1):
    a = rng.standard_normal((n, n))
    return a @ a.T / n + cond_floor * np.eye(n)


def random_factor(rng, n, k):
    from meanrisk.risk_models import FactorModel

    xi2 = rng.uniform(0.2, 1.5, n)
    om = rng.standard_normal((n, k))
    b = rng.standard_normal((k, k))
    phi = b @ b.T / max(k, 1) + 0.5 * np.eye(k)
    return FactorModel(xi2, om, phi)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
