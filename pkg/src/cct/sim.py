"""Closed-loop simulation of finite populations and realized costs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .coeffs import FiniteCoeffs, LimitCoeffs, solve_finite_coeffs
from .continuum import ContinuumSolution, limit_cost, mean_field_ode
from .finite import FiniteSolution, _CostTerms, _two_site_values, enumerate_fractions, finite_cost
from .model import ProblemSpec, SimplexVector, as_simplex, sample_initial_states
from .ode import uniform_grid
from .transport import solve_semidiscrete


@dataclass
class Finite:
    """The exact strategy: assignment and controls of a finite solution."""

    solution: FiniteSolution
    coeffs: FiniteCoeffs


@dataclass
class Continuum:
    """The continuum strategy: power-cell assignment and limit controls at ``P``.

    ``P`` defaults to the solution's minimizer.
    """

    solution: ContinuumSolution
    coeffs: LimitCoeffs
    P: Optional[np.ndarray] = None


Strategy = Union[Finite, Continuum]


@dataclass
class TrajectoryBundle:
    times: np.ndarray
    states: np.ndarray        # (N, K, n)
    controls: np.ndarray      # (N, K, m)
    mean_path: np.ndarray     # (K, n)
    assignments: np.ndarray
    realized_cost: float = float("nan")


@dataclass
class OccupancyVector:
    F: SimplexVector
    counts: np.ndarray


def _assign_all(X0, beta0, g):
    """Vectorized power-cell assignment (smallest index on ties)."""
    B = np.asarray(beta0, dtype=float)
    d = np.sum((X0[:, :, None] - B[None, :, :]) ** 2, axis=1) - np.asarray(g, dtype=float)
    return np.argmin(d, axis=1)


def occupancy(X0, beta0, g_star) -> OccupancyVector:
    """Fraction of initial states falling in each power cell."""
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    lab = _assign_all(X0, beta0, g_star)
    counts = np.bincount(lab, minlength=np.asarray(g_star).size)
    return OccupancyVector(SimplexVector.from_counts(counts), counts)


class _Law:
    """Feedback ``u_i = -R_u^{-1} B^T (K x_i + L xbar + psi_{lam_i})``.

    Gains are sampled once at the forward nodes and midpoints (by linear
    interpolation of the coefficient grid); ``k`` indexes half steps.
    """

    def __init__(self, coeffs, P, lam, finite, t, xbar_path=None):
        spec = coeffs.spec
        P = np.asarray(P, dtype=float)
        half = np.empty(2 * t.size - 1)
        half[0::2] = t
        half[1::2] = 0.5 * (t[:-1] + t[1:])
        phi1, phi2 = coeffs.phi1.at(half), coeffs.phi2.at(half)
        self.K = phi1 - phi2 / coeffs.N if finite else phi1
        self.L = phi2
        psi = coeffs.alpha.at(half) @ P                       # (H, n)
        self.psi = psi[:, None, :] - np.swapaxes(coeffs.beta.at(half), 1, 2)[:, lam, :]
        self.xbar = None if finite else xbar_path.at(half)
        self.lam = lam
        self.finite = finite
        self.G = spec.R_u_inv_Bt
        self.A = spec.A
        self.B = spec.B

    def control(self, k, X):
        xbar = X.mean(axis=0) if self.finite else self.xbar[k]
        p = X @ self.K[k].T + (self.L[k] @ xbar)[None, :] + self.psi[k]
        return -p @ self.G.T

    def rhs(self, k, X):
        return X @ self.A.T + self.control(k, X) @ self.B.T


def simulate(spec: ProblemSpec, X0, strategy: Strategy, dt_fwd=None) -> TrajectoryBundle:
    """RK4 forward simulation of the closed loop; controls recorded at every node."""
    X0 = np.asarray(X0, dtype=float)
    if X0.ndim == 1:
        X0 = X0[:, None]
    coeffs = strategy.coeffs
    dt = coeffs.dt if dt_fwd is None else dt_fwd
    t = uniform_grid(spec.T, dt)
    if isinstance(strategy, Finite):
        sol = strategy.solution
        if coeffs.N != X0.shape[0]:
            raise ValueError(f"strategy is for N={coeffs.N}, got {X0.shape[0]} agents")
        law = _Law(coeffs, sol.P_opt, np.asarray(sol.lam), True, t)
    else:
        sol = strategy.solution
        P = np.asarray(sol.P_star if strategy.P is None else as_simplex(strategy.P))
        lam = _assign_all(X0, coeffs.beta[0], sol.g_star.g)
        law = _Law(coeffs, P, lam, False, t, mean_field_ode(coeffs, P))
    N = X0.shape[0]
    states = np.empty((N, t.size, spec.n))
    controls = np.empty((N, t.size, spec.m))
    X = X0.copy()
    for k in range(t.size):
        states[:, k] = X
        controls[:, k] = law.control(2 * k, X)
        if k + 1 == t.size:
            break
        h = t[k + 1] - t[k]
        k1 = law.rhs(2 * k, X)
        k2 = law.rhs(2 * k + 1, X + 0.5 * h * k1)
        k3 = law.rhs(2 * k + 1, X + 0.5 * h * k2)
        k4 = law.rhs(2 * k + 2, X + h * k3)
        X = X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    bundle = TrajectoryBundle(t, states, controls, states.mean(axis=0), law.lam)
    bundle.realized_cost = realized_social_cost(spec, bundle)
    return bundle


def _quad_form(V, M):
    return np.einsum("...i,ij,...j->...", V, M, V)


def realized_social_cost(spec: ProblemSpec, bundle: TrajectoryBundle) -> float:
    """Population-average cost of the simulated trajectories (trapezoid in time)."""
    X, U = bundle.states, bundle.controls
    d = spec.destinations[np.asarray(bundle.assignments)]            # (N, n)
    xbar = X.mean(axis=0)
    E = X - d[:, None, :]
    run = 0.5 * (-_quad_form(X - xbar[None], spec.R_x) + _quad_form(E, spec.R_d)
                 + _quad_form(U, spec.R_u))                           # (N, K)
    running = np.trapezoid(run, bundle.times, axis=1)
    terminal = 0.5 * _quad_form(E[:, -1], spec.M)
    return float(np.mean(running + terminal))


def nearest_grid_point(P, N):
    """The point of the ``1/N`` grid nearest to ``P`` (largest-remainder rounding)."""
    P = np.asarray(P, dtype=float)
    raw = P * N
    counts = np.floor(raw).astype(int)
    short = N - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return SimplexVector.from_counts(counts)


@dataclass
class ComparisonTable:
    """Raw rows ``(N, seed, P, F, J, J_N, J_tilde)`` plus per-seed exact optima."""

    rows: list = field(default_factory=list)
    optima: list = field(default_factory=list)     # (N, seed, J_opt, J_tilde at P*)

    def summary(self):
        """Per ``(N, P)`` means and standard deviations over seeds."""
        out = []
        keys = sorted({(r["N"], tuple(r["P"])) for r in self.rows},
                      key=lambda k: (k[0], tuple(-p for p in k[1])))
        for N, P in keys:
            rs = [r for r in self.rows if r["N"] == N and tuple(r["P"]) == P]
            JN = np.array([r["J_N"] for r in rs])
            Jt = np.array([r["J_tilde"] for r in rs])
            F = np.array([r["F"] for r in rs])
            out.append(dict(N=N, P=np.array(P), J=rs[0]["J"], J_N_mean=JN.mean(),
                            J_N_std=JN.std(), J_tilde_mean=Jt.mean(), J_tilde_std=Jt.std(),
                            F_N_mean=F.mean(axis=0)))
        return out


def comparison_experiment(spec: ProblemSpec, N_list, seeds, P_grid_step=0.1, lc=None,
                          continuum=None, s_in=3500.0, delta=5e-5, optima=True):
    """Exact cost, continuum-strategy cost and limit cost on a grid of ``P``.

    For every ``N`` and seed the initial states are drawn once. At each grid
    point ``P``: ``J_N`` is the exact cost at the nearest ``1/N`` point,
    ``J_tilde`` the realized cost of the continuum strategy built at ``P``,
    ``J`` the limit cost, ``F`` the realized occupancy. With ``optima`` the
    exact optimum and the continuum strategy at ``P*`` are recorded too.
    """
    from .coeffs import solve_limit_coeffs
    from .continuum import solve_continuum
    from .finite import solve_finite

    lc = solve_limit_coeffs(spec) if lc is None else lc
    steps = int(round(1.0 / P_grid_step))
    grid = enumerate_fractions(steps, spec.D)
    beta0 = lc.beta[0]
    weights = {}
    limit_J = {}
    g = None
    for P in grid:
        w, C = solve_semidiscrete(spec.dist, beta0, np.asarray(P), s_in, delta, g0=g)
        g = w.g
        weights[P] = w
        limit_J[P] = limit_cost(spec, lc, P, s_in=s_in, delta=delta, g0=w.g)
    if optima and continuum is None:
        continuum = solve_continuum(spec, lc, s_in=s_in, delta=delta)
    table = ComparisonTable()
    for N in N_list:
        fc = solve_finite_coeffs(spec, N)
        for seed in seeds:
            X0 = sample_initial_states(spec.dist, N, seed)
            terms = _CostTerms(fc, X0)
            two = _two_site_values(terms.costs) if spec.D == 2 else None
            for P in grid:
                PN = nearest_grid_point(P, N)
                if two is not None:
                    JN = terms.total(PN, two[int(round(PN[0] * N))])
                else:
                    JN = finite_cost(spec, fc, X0, PN, _terms=terms)[0]
                sol = ContinuumSolution(P, weights[P], limit_J[P])
                b = simulate(spec, X0, Continuum(sol, lc))
                F = np.bincount(b.assignments, minlength=spec.D) / N
                table.rows.append(dict(N=N, seed=seed, P=np.asarray(P), F=F, J=limit_J[P],
                                       J_N=JN, J_tilde=b.realized_cost))
            if optima:
                fs = solve_finite(spec, X0, coeffs=fc)
                bt = simulate(spec, X0, Continuum(continuum, lc))
                table.optima.append(dict(N=N, seed=seed, J_opt=fs.J_opt, P_opt=fs.P_opt,
                                         J_tilde=bt.realized_cost))
    return table
