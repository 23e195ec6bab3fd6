import numpy as np
import pytest

from safeswitch.linalg import spectral_radius


def random_schur(rng, n, radius=None):
    A = rng.standard_normal((n, n))
    radius = rng.uniform(0.05, 0.95) if radius is None else radius
    return A * radius / spectral_radius(A)


def random_spd(rng, n, floor=0.1):
    G = rng.standard_normal((n, n))
    return G @ G.T / n + floor * np.eye(n)


def random_controllable(rng, n, m):
    while True:
        A = rng.standard_normal((n, n)) * rng.uniform(0.3, 1.5) / np.sqrt(n)
        B = rng.standard_normal((n, m))
        C = np.hstack([np.linalg.matrix_power(A, k) @ B for k in range(n)])
        if np.linalg.matrix_rank(C) == n:
            return A, B


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(results):
        ok, detail = results[k]
        terminalreporter.write_line(f"CRITERION {k}: {'PASS' if ok else 'FAIL'} - {detail}")
