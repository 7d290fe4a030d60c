"""Exact optimum for a finite population by enumerating occupancy vectors.

For ``N`` agents and ``D`` destinations every admissible occupancy vector
``P = (N_1, ..., N_D) / N`` is scored with the social cost ``J^N(P)``; the
transport part is a small discrete optimal transport problem whose
integral solution is the assignment.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb

import numpy as np

from .coeffs import FiniteCoeffs, chi_at_zero, default_dt, solve_finite_coeffs
from .errors import CapExceeded
from .escape import assert_horizon
from .model import ProblemSpec, SimplexVector, as_simplex
from .ode import TimeGrid, rk4_forward
from .transport import TransportPlan, discrete_ot

DEFAULT_CAP = 200_000
TIE_RTOL = 1e-12


def _compositions(N, D):
    if D == 1:
        yield (N,)
        return
    for first in range(N, -1, -1):
        for rest in _compositions(N - first, D - 1):
            yield (first,) + rest


def enumerate_fractions(N, D, cap=DEFAULT_CAP):
    """All ``(N_1, ..., N_D) / N``, starting from ``(N, 0, ..., 0)``."""
    if N < 1 or D < 1:
        raise ValueError("N and D must be positive")
    count = comb(N + D - 1, D - 1)
    if count > cap:
        raise CapExceeded(count, cap)
    return [SimplexVector.from_counts(c) for c in _compositions(N, D)]


def _sq_dist(X, B):
    """``|x_i - b_j|^2`` for rows ``x_i`` and columns ``b_j``."""
    return np.sum((X[:, :, None] - B[None, :, :]) ** 2, axis=1)


class _CostTerms:
    """The parts of ``J^N`` that do not depend on ``P`` or depend on it linearly."""

    def __init__(self, fc: FiniteCoeffs, X0):
        X0 = np.asarray(X0, dtype=float)
        N = X0.shape[0]
        if fc.N is not None and fc.N != N:
            raise ValueError(f"coefficients are for N={fc.N}, got {N} initial states")
        phi1, phi2 = fc.phi1[0], fc.phi2[0]
        alpha0, beta0 = fc.alpha[0], fc.beta[0]
        xbar = X0.mean(axis=0)
        self.N = N
        self.costs = _sq_dist(X0, beta0)
        self.const = (np.einsum("in,nm,im->", X0, phi1 - phi2 / N, X0) / (2.0 * N)
                      + 0.5 * xbar @ phi2 @ xbar
                      - np.sum(X0 ** 2) / (2.0 * N))
        self.linear = alpha0.T @ xbar - 0.5 * np.sum(beta0 ** 2, axis=0)
        self.fc = fc

    def total(self, P, transport):
        P = np.asarray(P, dtype=float)
        return float(self.const + 0.5 * transport + self.linear @ P + chi_at_zero(self.fc, P))


def finite_cost(spec: ProblemSpec, fc: FiniteCoeffs, X0, P_N, _terms=None):
    """``J^N(P^N)`` and the optimal plan of its transport term."""
    terms = _terms or _CostTerms(fc, X0)
    P = np.asarray(as_simplex(P_N))
    plan = discrete_ot(terms.costs, P)
    return terms.total(P, plan.value), plan


def value_for_assignment(fc: FiniteCoeffs, X0, lam):
    """Social cost of a fixed assignment (its transport term is the assignment cost)."""
    terms = _CostTerms(fc, X0)
    lam = np.asarray(lam, dtype=int)
    P = np.bincount(lam, minlength=fc.D) / terms.N
    transport = float(terms.costs[np.arange(terms.N), lam].mean())
    return terms.total(P, transport)


@dataclass
class FiniteSolution:
    """Optimum of the finite problem.

    ``lam[i]`` is the (0-based) destination of agent ``i``; ``cost_table``
    lists ``(P, J^N(P))`` in enumeration order.
    """

    P_opt: SimplexVector
    lam: np.ndarray
    J_opt: float
    cost_table: list
    coeffs: FiniteCoeffs = field(repr=False, default=None)
    plan: TransportPlan = field(repr=False, default=None)


def solve_finite(spec: ProblemSpec, X0, dt=None, cap=DEFAULT_CAP, override_horizon=False,
                 coeffs=None):
    """Minimize ``J^N`` over the whole grid; ties go to the lexicographically smallest ``P``."""
    X0 = np.asarray(X0, dtype=float)
    if X0.ndim == 1:
        X0 = X0[:, None]
    N = X0.shape[0]
    table_P = enumerate_fractions(N, spec.D, cap)
    assert_horizon(spec, override=override_horizon)
    fc = coeffs if coeffs is not None else solve_finite_coeffs(
        spec, N, default_dt(spec) if dt is None else dt)
    terms = _CostTerms(fc, X0)
    if spec.D == 2:
        values = _two_site_values(terms.costs)
        table = [(P, terms.total(P, values[int(round(P[0] * N))])) for P in table_P]
    else:
        table = [(P, finite_cost(spec, fc, X0, P, _terms=terms)[0]) for P in table_P]
    bP, bJ = table[0]
    for P, J in table[1:]:
        tol = TIE_RTOL * max(1.0, abs(bJ))
        if J < bJ - tol or (abs(J - bJ) <= tol and tuple(P) < tuple(bP)):
            bP, bJ = P, J
    plan = discrete_ot(terms.costs, bP)
    J = terms.total(bP, plan.value)
    return FiniteSolution(bP, plan.assignment, J, table, fc, plan)


def _two_site_values(costs):
    """Optimal transport value for every ``P = (k/N, 1 - k/N)``, ``k = 0..N``.

    With two sites the ``k`` rows that prefer the first site most (smallest
    ``c_i1 - c_i2``) go there.
    """
    N = costs.shape[0]
    order = np.argsort(costs[:, 0] - costs[:, 1], kind="stable")
    c = costs[order]
    first = np.concatenate([[0.0], np.cumsum(c[:, 0])])
    second = np.concatenate([np.cumsum(c[::-1, 1])[::-1], [0.0]])
    return (first + second) / N


def finite_control(fc: FiniteCoeffs, P_N, j, x, xbar, t):
    """``u = -R_u^{-1} B^T [(phi1 - phi2/N) x + phi2 xbar + psi_j]``."""
    spec = fc.spec
    N = fc.N
    x = np.asarray(x, dtype=float)
    xbar = np.asarray(xbar, dtype=float)
    psi = fc.psi_all(P_N, t)[:, j]
    p = (fc.phi1(t) - fc.phi2(t) / N) @ x + fc.phi2(t) @ xbar + psi
    return -spec.R_u_inv_Bt @ p


def _mean_rhs(coeffs, P, w):
    """Right-hand side of the mean dynamics, ``w`` weighting ``phi2``."""
    spec = coeffs.spec
    A, S = spec.A, spec.S
    P = np.asarray(P, dtype=float)

    def f(t, xb):
        K = coeffs.phi1(t) + w * coeffs.phi2(t)
        return (A - S @ K) @ xb - S @ (coeffs.psi_all(t=t, P=P) @ P)

    return f


def finite_mean_ode(fc: FiniteCoeffs, P_N, xbar0):
    """Mean state of the population under the finite-``N`` optimal controls."""
    N = fc.N
    f = _mean_rhs(fc, np.asarray(as_simplex(P_N)), (N - 1) / N)
    return TimeGrid(fc.t, rk4_forward(f, xbar0, fc.t))
