"""Continuum strategy: minimize the limit cost ``J`` over the simplex.

``J(P)`` combines closed-form quadratic terms with half the semi-discrete
transport cost ``C(P)``. Its minimizer is found with a projected
subgradient method using a target-level step with a path bound; each
evaluation of ``C(P)`` runs the dual ascent of :mod:`cct.transport`,
warm-started from the previous weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coeffs import LimitCoeffs, chi_at_zero
from .errors import MaxOuterExceeded
from .model import ProblemSpec, SimplexVector, as_simplex, moments
from .ode import TimeGrid, rk4_forward
from .transport import PowerWeights, project_simplex, solve_semidiscrete

S_IN = 3500.0
DELTA = 5e-5
MAX_OUTER = 500
KAPPA = 0.5
PATH_BOUND = 0.02      # simplex path length allowed before the level target is relaxed


@dataclass
class CostTerms:
    """``J(P) = const + linear.P + chi(0, P) + C(P)/2``."""

    const: float
    linear: np.ndarray

    @classmethod
    def of(cls, spec: ProblemSpec, lc: LimitCoeffs):
        phi1, phi2 = lc.phi1[0], lc.phi2[0]
        alpha0, beta0 = lc.alpha[0], lc.beta[0]
        xbar, quad, second = moments(spec.dist, phi1)
        const = 0.5 * quad + 0.5 * xbar @ phi2 @ xbar - 0.5 * second
        linear = alpha0.T @ xbar - 0.5 * np.sum(beta0 ** 2, axis=0)
        return cls(float(const), linear)

    def total(self, lc, P, C):
        P = np.asarray(P, dtype=float)
        return float(self.const + self.linear @ P + chi_at_zero(lc, P) + 0.5 * C)


def limit_cost(spec: ProblemSpec, lc: LimitCoeffs, P, s_in=S_IN, delta=DELTA, g0=None,
               max_iter=100_000, per_axis=None, return_weights=False):
    """``J(P)``; optionally also the power weights of the transport term."""
    P = np.asarray(as_simplex(P))
    weights, C = solve_semidiscrete(spec.dist, lc.beta[0], P, s_in, delta, max_iter=max_iter,
                                    g0=g0, per_axis=per_axis)
    J = CostTerms.of(spec, lc).total(lc, P, C)
    return (J, weights) if return_weights else J


def subgradient(spec: ProblemSpec, lc: LimitCoeffs, P, g_star, kappa=KAPPA, symmetrize=True):
    """``kappa g* - W P + H`` with ``W`` the symmetric part of ``W_int``.

    ``g*`` is the gradient of ``C`` and ``C`` enters ``J`` with weight one
    half, hence ``kappa = 1/2``. The quadratic term ``-P.W_int P / 2`` has
    gradient ``-(W_int + W_int^T) P / 2``; ``symmetrize=False`` uses
    ``W_int`` as is, which only agrees when ``W_int`` is symmetric.
    """
    P = np.asarray(P, dtype=float)
    W = lc.W_int
    if symmetrize:
        W = 0.5 * (W + W.T)
    return kappa * np.asarray(g_star, dtype=float) - W @ P + lc.H


@dataclass
class ContinuumSolution:
    P_star: SimplexVector
    g_star: PowerWeights
    J_star: float
    iterates: list = field(default_factory=list)
    converged: bool = True


def solve_continuum(spec: ProblemSpec, lc: LimitCoeffs, P0=None, g0=None, s_in=S_IN,
                    delta=DELTA, max_outer=MAX_OUTER, kappa=KAPPA, symmetrize=True,
                    level_frac=0.01, path_bound=PATH_BOUND, per_axis=None):
    """Projected subgradient descent on ``J`` with a target-level step.

    The step is ``(J(P_k) - J_lev) / |g_k|^2`` with ``J_lev = J_rec - delta_lev``,
    ``J_rec`` the best value when the current group of iterations began.
    A new group starts, with ``delta_lev`` unchanged, once an iterate gets
    ``delta_lev / 2`` below ``J_rec``; it starts with ``delta_lev`` halved when
    the iterates travel farther than ``path_bound`` without doing so.
    ``delta_lev`` starts at ``level_frac |J(P0)|``. Stops once successive
    iterates differ by at most ``delta`` in max-norm and returns the best
    iterate seen.
    """
    D = spec.D
    P = np.full(D, 1.0 / D) if P0 is None else np.asarray(as_simplex(P0), dtype=float)
    g = np.zeros(D) if g0 is None else np.asarray(g0, dtype=float)
    terms = CostTerms.of(spec, lc)
    beta0 = lc.beta[0]

    def evaluate(P, g):
        w, C = solve_semidiscrete(spec.dist, beta0, P, s_in, delta, g0=g, per_axis=per_axis)
        return terms.total(lc, P, C), w

    J, w = evaluate(P, g)
    iterates = [(SimplexVector(P), J)]
    best = (J, P.copy(), w)
    if D == 1:
        return ContinuumSolution(SimplexVector([1.0]), w, J, iterates)
    delta_lev = level_frac * max(abs(J), 1.0)
    J_rec, path = J, 0.0
    for _ in range(max_outer):
        if J <= J_rec - 0.5 * delta_lev:
            J_rec, path = best[0], 0.0
        elif path > path_bound:
            J_rec, path = best[0], 0.0
            delta_lev *= 0.5
        sg = subgradient(spec, lc, P, w.g, kappa=kappa, symmetrize=symmetrize)
        sg = sg - sg.mean()              # only the simplex-tangent part moves P
        norm2 = float(sg @ sg)
        if norm2 == 0.0:
            break
        step = (J - (J_rec - delta_lev)) / norm2
        P_new = np.asarray(project_simplex(P - step * sg))
        moved = float(np.max(np.abs(P_new - P)))
        path += float(np.linalg.norm(P_new - P))
        P = P_new
        J, w = evaluate(P, w.g)
        iterates.append((SimplexVector(P), J))
        if J < best[0]:
            best = (J, P.copy(), w)
        if moved <= delta:
            break
    else:
        Jb, Pb, wb = best
        raise MaxOuterExceeded(
            f"outer loop did not settle in {max_outer} iterations",
            best=ContinuumSolution(SimplexVector(project_simplex(Pb)), wb, Jb, iterates, False))
    Jb, Pb, wb = best
    return ContinuumSolution(project_simplex(Pb), wb, Jb, iterates)


def continuum_control(lc: LimitCoeffs, P, j, x, t, xbar_t):
    """``u = -R_u^{-1} B^T [phi1 x + phi2 xbar + psi_j(t, P)]``."""
    x = np.asarray(x, dtype=float)
    xbar_t = np.asarray(xbar_t, dtype=float)
    psi = lc.psi_all(P, t)[:, j]
    return -lc.spec.R_u_inv_Bt @ (lc.phi1(t) @ x + lc.phi2(t) @ xbar_t + psi)


def mean_field_ode(lc: LimitCoeffs, P, xbar0=None):
    """Mean state of the continuum under the strategy with occupancy ``P``."""
    spec = lc.spec
    A, S = spec.A, spec.S
    P = np.asarray(as_simplex(P))
    xbar0 = lc.xbar0 if xbar0 is None else np.asarray(xbar0, dtype=float)

    def f(t, xb):
        return (A - S @ (lc.phi1(t) + lc.phi2(t))) @ xb - S @ (lc.psi_all(P, t) @ P)

    return TimeGrid(lc.t, rk4_forward(f, xbar0, lc.t))
