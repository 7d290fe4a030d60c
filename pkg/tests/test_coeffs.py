import itertools

import numpy as np
import pytest

from cct.coeffs import (BLOWUP, assemble_psi, chi_at_zero, full_system_oracle,
                        solve_finite_coeffs, solve_limit_coeffs, terminal_quadratic)
from cct.errors import EscapeDetected
from cct.model import ProblemSpec, UniformBox, planar_instance

from conftest import random_spec


def scalar_spec(**kw):
    base = dict(A=[[0.0]], B=[[1.0]], R_x=[[0.0]], R_d=[[0.0]], R_u=[[1.0]], M=[[2.0]],
                destinations=[[1.0]], T=1.5, dist=UniformBox([-1.0], [1.0]))
    base.update(kw)
    return ProblemSpec(**base)


def test_scalar_riccati_closed_form():
    m, T = 2.0, 1.5
    lc = solve_limit_coeffs(scalar_spec(M=[[m]], T=T), dt=T / 2000)
    exact = m / (1 + m * (T - lc.t))
    assert np.max(np.abs(lc.phi1.values[:, 0, 0] - exact)) < 1e-11


def test_zero_congestion_gives_zero_phi2(planar):
    spec = planar.replace(R_x=np.zeros((2, 2)))
    assert np.all(solve_limit_coeffs(spec).phi2.values == 0.0)
    for N in (2, 7):
        assert np.all(solve_finite_coeffs(spec, N).phi2.values == 0.0)


def test_zero_destinations_zero_affine_terms(planar):
    lc = solve_limit_coeffs(planar.replace(destinations=np.zeros((3, 2))))
    for grid in (lc.alpha, lc.beta, lc.W):
        assert np.all(grid.values == 0.0)
    np.testing.assert_array_equal(lc.H, np.zeros(3))
    assert chi_at_zero(lc, [0.2, 0.3, 0.5]) == 0.0


def test_terminal_conditions_are_exact(planar):
    for c in (solve_limit_coeffs(planar), solve_finite_coeffs(planar, 5)):
        np.testing.assert_array_equal(c.phi1[-1], planar.M)
        np.testing.assert_array_equal(c.phi2[-1], np.zeros((2, 2)))
        np.testing.assert_array_equal(c.alpha[-1], np.zeros((2, 2)))
        np.testing.assert_array_equal(c.beta[-1], planar.M @ planar.destinations.T)
        assert np.all(c.alpha.values[:, :, -1] == 0.0)


def test_symmetric_at_every_node(rng):
    spec = random_spec(rng, 3, 2)
    for c in (solve_limit_coeffs(spec), solve_finite_coeffs(spec, 4)):
        for grid in (c.phi1, c.phi2):
            v = grid.values
            assert np.array_equal(v, np.swapaxes(v, 1, 2))


def test_planar_reference_values(planar_lc):
    # regression values from the first build (dt = T/2000)
    np.testing.assert_allclose(np.diag(planar_lc.phi1[0]), [15.0513901, 15.0513901], rtol=1e-7)
    np.testing.assert_allclose(np.diag(planar_lc.phi2[0]), [1.05263457, 1.05263457], rtol=1e-7)
    np.testing.assert_allclose(planar_lc.beta[0], [[-86.88711772, 112.72817263],
                                                 [-54.14848553, 128.83219729]], rtol=1e-8)
    np.testing.assert_allclose(planar_lc.H, [-5011.19111781, -13743.35292495], rtol=1e-8)


def test_limit_coefficients_match_adaptive_integration(planar, planar_lc):
    # independent path: the same limit ODEs through an adaptive 8th-order method
    from scipy.integrate import solve_ivp
    S, A, Rx, Rd, M = planar.S, planar.A, planar.R_x, planar.R_d, planar.M
    d = planar.destinations.T

    def rhs(t, y):
        p1, p2 = y[:4].reshape(2, 2), y[4:8].reshape(2, 2)
        b, a = y[8:12].reshape(2, 2), y[12:].reshape(2, 1)
        dp1 = p1 @ S @ p1 - p1 @ A - A.T @ p1 - (Rd - Rx)
        dp2 = p1 @ S @ p2 + p2 @ S @ p1 + p2 @ S @ p2 - p2 @ A - A.T @ p2 - Rx
        db = (p1 @ S - A.T) @ b + (p2 @ S @ b[:, -1])[:, None] - Rd @ d
        da = (p1 @ S - A.T + p2 @ S) @ a - p2 @ S @ (b[:, :1] - b[:, 1:])
        return np.concatenate([dp1.ravel(), dp2.ravel(), db.ravel(), da.ravel()])

    yT = np.concatenate([M.ravel(), np.zeros(4), (M @ d).ravel(), np.zeros(2)])
    y0 = solve_ivp(rhs, (3.0, 0.0), yT, method="DOP853", rtol=1e-12, atol=1e-12).y[:, -1]
    np.testing.assert_allclose(planar_lc.phi1[0].ravel(), y0[:4], rtol=1e-9)
    np.testing.assert_allclose(planar_lc.phi2[0].ravel(), y0[4:8], rtol=1e-9)
    np.testing.assert_allclose(planar_lc.beta[0].ravel(), y0[8:12], rtol=1e-9)
    np.testing.assert_allclose(planar_lc.alpha[0][:, 0], y0[12:], rtol=1e-8)


def test_large_N_approaches_limit(planar, planar_lc):
    N = 10**6
    fc = solve_finite_coeffs(planar, N)
    gap = np.linalg.norm(fc.phi1[0] - planar_lc.phi1[0])
    assert gap <= 10 / N * np.linalg.norm(planar_lc.phi1[0])


def test_finite_to_limit_monotone(planar, planar_lc):
    gaps = []
    for N in (10, 100, 1000, 10000):
        fc = solve_finite_coeffs(planar, N)
        gaps.append(np.linalg.norm(fc.phi1[0] - planar_lc.phi1[0]))
        # beta^N does not depend on N at all (see the exact identity below)
        assert np.linalg.norm(fc.beta[0] - planar_lc.beta[0]) <= 1e-12 * np.linalg.norm(planar_lc.beta[0])
    assert np.all(np.diff(gaps) < 0)


def test_finite_coefficients_exact_identity(rng):
    # phi2^N = phi2 and phi1^N = phi1 + phi2 / N solve the population equations;
    # alpha^N, beta^N then coincide with their limits
    spec = random_spec(rng, 2, 3)
    lc = solve_limit_coeffs(spec)
    for N in (3, 50):
        fc = solve_finite_coeffs(spec, N)
        scale = np.abs(lc.phi1.values).max()
        assert np.abs(fc.phi2.values - lc.phi2.values).max() <= 1e-12 * scale
        assert np.abs(fc.phi1.values - lc.phi1.values - lc.phi2.values / N).max() <= 1e-12 * scale
        bscale = np.abs(lc.beta.values).max()
        assert np.abs(fc.beta.values - lc.beta.values).max() <= 1e-12 * bscale
        assert np.abs(fc.alpha.values - lc.alpha.values).max() <= 1e-12 * bscale


def test_grid_refinement_order(rng):
    spec = random_spec(rng, 2, 2, T=2.0)
    phis = [solve_limit_coeffs(spec, dt=2.0 / K).phi1[0] for K in (20, 40, 80)]
    e1 = np.linalg.norm(phis[0] - phis[1])
    e2 = np.linalg.norm(phis[1] - phis[2])
    assert np.log2(e1 / e2) >= 3.5


def test_blowup_past_escape_time(planar):
    with pytest.raises(EscapeDetected) as exc:
        solve_limit_coeffs(planar.replace(T=30.0))
    assert 0.0 < exc.value.t < 30.0
    assert BLOWUP == 1e12


def test_psi_single_destination_is_minus_beta(rng):
    spec = random_spec(rng, 2, 1)
    lc = solve_limit_coeffs(spec)
    for t in (0.0, 0.37, 1.0):
        np.testing.assert_array_equal(assemble_psi(lc, [1.0], 0, t), -lc.beta(t)[:, 0])


def test_psi_terminal_value(planar_lc, planar):
    for j in range(2):
        np.testing.assert_array_equal(assemble_psi(planar_lc, [0.3, 0.7], j, 3.0),
                                      -planar.M @ planar.destinations[j])


def test_psi_index_out_of_range(planar_lc):
    with pytest.raises(IndexError):
        assemble_psi(planar_lc, [0.5, 0.5], 2, 0.0)


def test_psi_affine_in_P(rng):
    spec = random_spec(rng, 2, 3)
    lc = solve_limit_coeffs(spec)
    P, Q = rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(3))
    for th in (0.25, 0.5, 0.75):
        t = rng.uniform(0, spec.T)
        lhs = assemble_psi(lc, th * P + (1 - th) * Q, 1, t)
        rhs = th * assemble_psi(lc, P, 1, t) + (1 - th) * assemble_psi(lc, Q, 1, t)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-13, atol=1e-13)


def test_psi_matches_population_oracle(rng):
    N, n, D = 5, 2, 3
    spec = random_spec(rng, n, D)
    lam = np.array([0, 1, 2, 2, 0])
    P = np.bincount(lam, minlength=D) / N
    fc = solve_finite_coeffs(spec, N, dt=1e-4)
    ts = rng.uniform(0, spec.T, 20)
    _, terms = full_system_oracle(spec, N, lam, np.zeros((N, n)), t_eval=ts)
    for k, t in enumerate(ts):
        Psi = terms.Psi_t[k].reshape(N, n)
        for i in range(N):
            np.testing.assert_allclose(assemble_psi(fc, P, lam[i], t), Psi[i],
                                       rtol=0, atol=1e-8 * max(1.0, np.abs(Psi).max()))


def test_chi_is_quadratic_in_P(rng):
    spec = random_spec(rng, 2, 3)
    lc = solve_limit_coeffs(spec)
    P, Q = rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(3))
    th = np.array([0, 0.25, 0.5, 0.75, 1.0])
    vals = np.array([chi_at_zero(lc, x * P + (1 - x) * Q) for x in th])
    fit = np.polyval(np.polyfit(th, vals, 2), th)
    assert np.max(np.abs(fit - vals)) <= 1e-9 * np.max(np.abs(vals))


def test_chi_matches_population_oracle(rng):
    N, D = 4, 2
    spec = random_spec(rng, 1, D)
    fc = solve_finite_coeffs(spec, N, dt=1e-4)
    for lam in ([0, 0, 1, 1], [1, 1, 1, 0], [0, 0, 0, 0]):
        _, terms = full_system_oracle(spec, N, lam, np.zeros((N, 1)))
        P = np.bincount(lam, minlength=D) / N
        assert chi_at_zero(fc, P) == pytest.approx(terms.chi0, rel=1e-8, abs=1e-8)


def test_chi_terminal_form(planar):
    lc = solve_limit_coeffs(planar)
    P = np.array([0.4, 0.6])
    direct = 0.5 * P @ terminal_quadratic(planar) - 0.5 * P @ lc.W_int @ P - 0.5 * P @ lc.b_int
    assert chi_at_zero(lc, P) == pytest.approx(direct, rel=1e-15)


def test_oracle_block_structure_and_decomposition(rng):
    spec = random_spec(rng, 1, 2)
    N = 2
    fc = solve_finite_coeffs(spec, N, dt=1e-4)
    _, terms = full_system_oracle(spec, N, [0, 1], np.zeros((N, 1)))
    phi = terms.phi0
    assert phi[0, 0] == pytest.approx(phi[1, 1], rel=1e-9)
    assert phi[0, 1] == pytest.approx(phi[1, 0], rel=1e-9)
    assert phi[0, 0] == pytest.approx(fc.phi1[0][0, 0], rel=1e-8)
    assert phi[0, 1] == pytest.approx(fc.phi2[0][0, 0] / N, rel=1e-8)


def test_oracle_block_structure_three_agents(rng):
    spec = random_spec(rng, 2, 2)
    _, terms = full_system_oracle(spec, 3, [0, 1, 1], np.zeros((3, 2)))
    b = lambda i, j: terms.phi0[2 * i:2 * i + 2, 2 * j:2 * j + 2]
    for i, j in itertools.product(range(3), repeat=2):
        ref = b(0, 0) if i == j else b(0, 1)
        np.testing.assert_allclose(b(i, j), ref, rtol=0, atol=1e-9 * np.abs(ref).max())


def test_oracle_identical_agents_match_value_identity(rng):
    from cct.finite import value_for_assignment
    spec = random_spec(rng, 2, 2)
    x = rng.uniform(-1, 1, 2)
    X0 = np.vstack([x, x])
    fc = solve_finite_coeffs(spec, 2, dt=1e-4)
    cost, _ = full_system_oracle(spec, 2, [1, 1], X0)
    assert value_for_assignment(fc, X0, [1, 1]) == pytest.approx(cost, rel=1e-8)


def test_oracle_size_cap(rng):
    from cct.errors import CCTError
    spec = random_spec(rng, 3, 2)
    with pytest.raises(CCTError):
        full_system_oracle(spec, 5, [0] * 5, np.zeros((5, 3)))
