import numpy as np
import pytest

from cct.coeffs import solve_finite_coeffs, solve_limit_coeffs
from cct.continuum import (continuum_control, limit_cost, mean_field_ode, solve_continuum,
                           subgradient)
from cct.errors import MaxOuterExceeded
from cct.finite import finite_control
from cct.model import planar_instance
from conftest import random_spec

V = np.array([1.0, -1.0])
GRID_MIN = 0.531        # minimizer of J on a 1e-3 grid for the planar instance


def fd_error(spec, lc, p, h=1e-3, **kw):
    P = np.array([p, 1 - p])
    _, w = limit_cost(spec, lc, P, return_weights=True)
    fd = (limit_cost(spec, lc, P + h * V, g0=w.g) - limit_cost(spec, lc, P - h * V, g0=w.g)) / (2 * h)
    an = subgradient(spec, lc, P, w.g, **kw) @ V
    return abs(fd - an) / abs(fd)


def test_single_destination(rng):
    spec = random_spec(rng, 2, 1)
    sol = solve_continuum(spec, solve_limit_coeffs(spec))
    assert tuple(sol.P_star) == (1.0,)
    assert np.isfinite(sol.J_star) and sol.converged


def test_planar_minimizer(planar_sol, planar, planar_lc):
    assert planar_sol.converged
    assert planar_sol.P_star[0] == pytest.approx(0.5315, abs=2e-3)
    assert planar_sol.J_star == pytest.approx(limit_cost(planar, planar_lc, planar_sol.P_star), rel=1e-9)
    assert planar_sol.J_star == min(J for _, J in planar_sol.iterates)


def test_grid_cross_check(planar, planar_lc, planar_sol):
    ps = np.arange(0.45, 0.65, 0.002)
    Js = [limit_cost(planar, planar_lc, [p, 1 - p]) for p in ps]
    p_grid = ps[int(np.argmin(Js))]
    assert abs(p_grid - GRID_MIN) <= 0.004
    assert abs(planar_sol.P_star[0] - p_grid) <= 0.005
    assert planar_sol.J_star <= min(Js) + 1e-6 * abs(min(Js))


def test_minimizer_is_stable_under_restarts(planar, planar_lc, planar_sol):
    for P0 in ([0.2, 0.8], [0.85, 0.15]):
        other = solve_continuum(planar, planar_lc, P0=P0)
        assert abs(other.P_star[0] - planar_sol.P_star[0]) <= 3e-3
        assert other.J_star == pytest.approx(planar_sol.J_star, rel=1e-6)


def test_convexity_along_segments(planar, planar_lc, rng):
    for _ in range(100):
        p, q, th = rng.uniform(size=3)
        P, Q = np.array([p, 1 - p]), np.array([q, 1 - q])
        J = [limit_cost(planar, planar_lc, x) for x in (P, Q, th * P + (1 - th) * Q)]
        assert J[2] <= th * J[0] + (1 - th) * J[1] + 1e-6


def test_mirror_symmetric_instance_splits_evenly():
    # a generic direction: an axis-aligned cell boundary would cut whole grid columns
    spec = planar_instance(3.0).replace(destinations=[[-5.3, -2.9], [5.3, 2.9]])
    sol = solve_continuum(spec, solve_limit_coeffs(spec), P0=[0.8, 0.2])
    np.testing.assert_allclose(np.asarray(sol.P_star), [0.5, 0.5], atol=2e-3)


def test_subgradient_matches_finite_differences(planar, planar_lc):
    # away from the minimizer, where the directional derivative is not ~0
    for p in (0.08, 0.2, 0.33, 0.44, 0.62, 0.75, 0.9):
        assert fd_error(planar, planar_lc, p) <= 1e-3


def test_nonsymmetrized_quadratic_gradient_is_wrong(planar, planar_lc):
    W = planar_lc.W_int
    assert np.max(np.abs(W - W.T)) > 1e-6 * np.max(np.abs(W))
    assert max(fd_error(planar, planar_lc, p, symmetrize=False) for p in (0.2, 0.75)) > 1e-2


def test_subgradient_inequality(planar, planar_lc, rng):
    for _ in range(20):
        p, q = rng.uniform(0.02, 0.98, size=2)
        P, Q = np.array([p, 1 - p]), np.array([q, 1 - q])
        JP, w = limit_cost(planar, planar_lc, P, return_weights=True)
        JQ = limit_cost(planar, planar_lc, Q)
        g = subgradient(planar, planar_lc, P, w.g)
        assert JQ >= JP + g @ (Q - P) - 1e-6 * abs(JP)


def test_outer_budget(planar, planar_lc):
    with pytest.raises(MaxOuterExceeded) as exc:
        solve_continuum(planar, planar_lc, P0=[0.1, 0.9], max_outer=1)
    best = exc.value.best
    assert not best.converged and len(best.iterates) == 2
    assert best.J_star == min(J for _, J in best.iterates)


def test_continuum_control_is_large_population_limit(rng):
    spec = random_spec(rng, 2, 2)
    lc = solve_limit_coeffs(spec)
    fc = solve_finite_coeffs(spec, 10**5)
    x, xbar, P = np.array([0.4, -1.0]), np.array([0.2, 0.1]), np.array([0.3, 0.7])
    for t in (0.0, 0.37, spec.T):
        for j in range(2):
            uc = continuum_control(lc, P, j, x, t, xbar)
            uf = finite_control(fc, P, j, x, xbar, t)
            assert np.max(np.abs(uc - uf)) <= 1e-3


def test_mean_field_at_rest(rng):
    spec = random_spec(rng, 2, 3).replace(destinations=np.zeros((3, 2)))
    lc = solve_limit_coeffs(spec)
    np.testing.assert_array_equal(mean_field_ode(lc, [0.2, 0.3, 0.5]).values, 0.0)


def test_mean_field_starts_at_initial_mean(planar_lc, planar_sol):
    path = mean_field_ode(planar_lc, planar_sol.P_star)
    np.testing.assert_array_equal(path[0], [0.0, 0.0])
    P = np.asarray(planar_sol.P_star)
    # the population ends near the occupancy-weighted destination mean
    target = P @ planar_instance().destinations
    assert np.linalg.norm(path[-1] - target) <= 0.1 * np.linalg.norm(target)
