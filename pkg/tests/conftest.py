import numpy as np
import pytest

from cct.coeffs import solve_limit_coeffs
from cct.continuum import solve_continuum
from cct.model import ProblemSpec, UniformBox, planar_instance


@pytest.fixture(scope="session")
def planar():
    return planar_instance(3.0)


@pytest.fixture(scope="session")
def planar_lc(planar):
    return solve_limit_coeffs(planar)


@pytest.fixture(scope="session")
def planar_sol(planar, planar_lc):
    return solve_continuum(planar, planar_lc, P0=[0.5, 0.5], g0=[0.0, 0.0])


def random_spec(rng, n, D, T=1.0, m=None, diag=False):
    """A small well-posed instance: moderate weights, horizon well below escape."""
    m = n if m is None else m

    def psd(k, lo):
        if diag:
            return np.diag(rng.uniform(lo, 1.0, k))
        G = rng.normal(size=(k, k))
        return G @ G.T / k + lo * np.eye(k)

    A = np.diag(rng.uniform(-0.3, 0.3, n)) if diag else 0.3 * rng.normal(size=(n, n))
    B = np.eye(n, m) if diag else np.eye(n, m) + 0.2 * rng.normal(size=(n, m))
    return ProblemSpec(
        A=A, B=B, R_x=0.5 * psd(n, 0.0), R_d=psd(n, 0.2), R_u=psd(m, 0.5) + np.eye(m),
        M=2.0 * psd(n, 0.5), destinations=rng.uniform(-2, 2, size=(D, n)), T=T,
        dist=UniformBox(-2 * np.ones(n), 2 * np.ones(n)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(mod.LINES):
        terminalreporter.write_line(line)
