import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("snfkit", max_examples=30, deadline=None)
settings.load_profile("snfkit")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def trapezoid_grid(lo, hi, n, dim):
    x = np.linspace(lo, hi, n)
    w = np.full(n, x[1] - x[0])
    w[0] = w[-1] = w[0] / 2
    if dim == 1:
        return x[:, None], w
    xx, yy = np.meshgrid(x, x, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1), np.outer(w, w).ravel()


def fd_grad(f, x, h=1e-5):
    """Central-difference gradient of a batched scalar function f: (n, d) -> (n,)."""
    g = np.zeros_like(x)
    for k in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[k] = h
        g[:, k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(RESULTS):
        ok, detail = RESULTS[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
