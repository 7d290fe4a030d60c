"""Backward coefficient systems of the value function.

Both the finite-population system (population size ``N``) and its
``N -> inf`` limit share one right-hand side, parameterized by the
population-dependent scalar weights. All systems are integrated jointly,
backward from ``T`` to ``0``, with classic RK4 on a uniform grid.

Destination indices are 0-based throughout the package.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp

from .errors import CCTError, EscapeDetected
from .model import ProblemSpec, as_simplex, moments
from .ode import TimeGrid, rk4_step, uniform_grid

BLOWUP = 1e12
DEFAULT_STEPS = 2000


def default_dt(spec):
    return spec.T / DEFAULT_STEPS


def _weights(N):
    """Scalar coefficients ``(c11, c1x, c22, cb, ca)`` of the finite-N equations."""
    if N is None:
        return 0.0, 1.0, 1.0, 0.0, 1.0
    N = float(N)
    return (N - 1) / N**2, (N - 1) / N, (N - 2) / N, 1.0 / N, (N - 1) / N


class _System:
    """Right-hand side of the joint (phi1, phi2, beta, alpha) system."""

    def __init__(self, spec: ProblemSpec, N=None):
        self.n, self.D = spec.n, spec.D
        self.A, self.S = spec.A, spec.S
        self.R_x, self.R_d = spec.R_x, spec.R_d
        self.Rdd = spec.R_d @ spec.destinations.T  # n x D
        self.c11, self.c1x, self.c22, self.cb, self.ca = _weights(N)
        n, D = self.n, self.D
        self.sizes = [n * n, n * n, n * D, n * D]
        self.offsets = np.cumsum([0] + self.sizes)

    def unpack(self, y):
        n, D, o = self.n, self.D, self.offsets
        return (y[o[0]:o[1]].reshape(n, n), y[o[1]:o[2]].reshape(n, n),
                y[o[2]:o[3]].reshape(n, D), y[o[3]:o[4]].reshape(n, D))

    def pack(self, phi1, phi2, beta, alpha):
        return np.concatenate([phi1.ravel(), phi2.ravel(), beta.ravel(), alpha.ravel()])

    def derivs(self, phi1, phi2, beta, alpha):
        A, S = self.A, self.S
        p1S = phi1 @ S
        p2S = phi2 @ S
        dphi1 = (p1S @ phi1 + self.c11 * (p2S @ phi2) - phi1 @ A - A.T @ phi1
                 - self.R_d + self.c1x * self.R_x)
        dphi2 = (phi1.T @ S @ phi2 + phi2.T @ S @ phi1 + self.c22 * (p2S @ phi2)
                 - phi2 @ A - A.T @ phi2 - self.R_x)
        Kb = p1S - A.T - self.cb * p2S
        dbeta = Kb @ beta + (p2S @ beta[:, -1])[:, None] - self.Rdd
        Ka = p1S - A.T + self.ca * p2S
        dalpha = np.zeros_like(alpha)
        dalpha[:, :-1] = Ka @ alpha[:, :-1] - p2S @ (beta[:, :-1] - beta[:, -1:])
        return dphi1, dphi2, dbeta, dalpha

    def __call__(self, t, y):
        return self.pack(*self.derivs(*self.unpack(y)))


@dataclass(frozen=True)
class Coeffs:
    """Grid samples of the coefficient functions.

    ``alpha`` holds ``D`` columns with the last one identically zero.
    ``W_int`` is ``2 * int_0^T W dt`` and ``b_int[j]`` is
    ``int_0^T ([beta_j]_S^2 - [d_j]_{R_d}^2) dt`` (both trapezoid).
    """

    spec: ProblemSpec
    N: Optional[int]
    phi1: TimeGrid
    phi2: TimeGrid
    alpha: TimeGrid
    beta: TimeGrid
    W: TimeGrid
    W_int: np.ndarray
    b_int: np.ndarray

    @property
    def t(self):
        return self.phi1.t

    @property
    def dt(self):
        return self.phi1.dt

    @property
    def D(self):
        return self.spec.D

    def psi_all(self, P, t):
        """``(n, D)`` matrix whose column ``j`` is ``psi_j(t, P)``."""
        P = np.asarray(P, dtype=float)
        a = self.alpha(t)
        return (a @ P)[:, None] - self.beta(t)

    def psi_node(self, P, k):
        P = np.asarray(P, dtype=float)
        return (self.alpha[k] @ P)[:, None] - self.beta[k]


class LimitCoeffs(Coeffs):
    """Limit (``N -> inf``) coefficients; also carries ``H`` and the initial mean."""

    def __init__(self, *args, H=None, xbar0=None, **kw):
        super().__init__(*args, **kw)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "xbar0", xbar0)


class FiniteCoeffs(Coeffs):
    pass


def _integrate(spec: ProblemSpec, N, dt):
    spec.check()
    sysf = _System(spec, N)
    n, D = spec.n, spec.D
    t = uniform_grid(spec.T, dt)
    K = t.size
    phi1 = np.empty((K, n, n))
    phi2 = np.empty((K, n, n))
    beta = np.empty((K, n, D))
    alpha = np.empty((K, n, D))
    phi1[-1] = spec.M
    phi2[-1] = 0.0
    beta[-1] = spec.M @ spec.destinations.T
    alpha[-1] = 0.0
    y = sysf.pack(phi1[-1], phi2[-1], beta[-1], alpha[-1])
    for k in range(K - 1, 0, -1):
        y = rk4_step(sysf, t[k], y, t[k - 1] - t[k])
        p1, p2, b, a = sysf.unpack(y)
        p1 = 0.5 * (p1 + p1.T)
        p2 = 0.5 * (p2 + p2.T)
        a[:, -1] = 0.0
        if not (np.all(np.isfinite(y)) and np.max(np.abs(p1)) <= BLOWUP
                and np.max(np.abs(p2)) <= BLOWUP):
            raise EscapeDetected(t[k - 1])
        phi1[k - 1], phi2[k - 1], beta[k - 1], alpha[k - 1] = p1, p2, b, a
        y = sysf.pack(p1, p2, b, a)

    S = spec.S
    W = np.einsum("kin,nm,kmj->kij", (0.5 * alpha - beta).transpose(0, 2, 1), S, alpha)
    W_int = 2.0 * np.trapezoid(W, t, axis=0)
    dRd = np.einsum("jn,nm,jm->j", spec.destinations, spec.R_d, spec.destinations)
    bS = np.einsum("knj,nm,kmj->kj", beta, S, beta)
    b_int = np.trapezoid(bS - dRd[None, :], t, axis=0)
    grids = dict(phi1=TimeGrid(t, phi1), phi2=TimeGrid(t, phi2),
                 alpha=TimeGrid(t, alpha), beta=TimeGrid(t, beta), W=TimeGrid(t, W))
    return grids, W_int, b_int


def terminal_quadratic(spec):
    """Vector of ``[d_j]_M^2``."""
    d = spec.destinations
    return np.einsum("jn,nm,jm->j", d, spec.M, d)


def solve_limit_coeffs(spec: ProblemSpec, dt=None) -> LimitCoeffs:
    """Integrate the limiting coefficient system and assemble ``W_int`` and ``H``.

    Raises :class:`EscapeDetected` when ``phi1`` or ``phi2`` exceeds
    ``BLOWUP`` in max-norm, i.e. the horizon is past the escape time.
    """
    dt = default_dt(spec) if dt is None else dt
    grids, W_int, b_int = _integrate(spec, None, dt)
    xbar0 = moments(spec.dist)[0]
    alpha0, beta0 = grids["alpha"][0], grids["beta"][0]
    H = (-0.5 * b_int + alpha0.T @ xbar0
         + 0.5 * (terminal_quadratic(spec) - np.sum(beta0**2, axis=0)))
    return LimitCoeffs(spec, None, W_int=W_int, b_int=b_int, H=H, xbar0=xbar0, **grids)


def solve_finite_coeffs(spec: ProblemSpec, N, dt=None) -> FiniteCoeffs:
    """Same scheme on the population-``N`` equations."""
    if N < 1:
        raise ValueError("N must be at least 1")
    dt = default_dt(spec) if dt is None else dt
    grids, W_int, b_int = _integrate(spec, int(N), dt)
    return FiniteCoeffs(spec, int(N), W_int=W_int, b_int=b_int, **grids)


def assemble_psi(coeffs: Coeffs, P, j, t):
    """``psi_j(t, P) = sum_{k<D} P_k alpha_k(t) - beta_j(t)``."""
    D = coeffs.D
    if not 0 <= j < D:
        raise IndexError(f"destination index {j} out of range for D={D}")
    P = np.asarray(as_simplex(P))
    return coeffs.alpha(t) @ P - coeffs.beta(t)[:, j]


def chi_at_zero(coeffs: Coeffs, P):
    """``chi(0, P)`` from the integrated ``W`` and the beta-quadrature vector."""
    P = np.asarray(P, dtype=float)
    chiT = 0.5 * P @ terminal_quadratic(coeffs.spec)
    return float(chiT - 0.5 * P @ coeffs.W_int @ P - 0.5 * P @ coeffs.b_int)


# --- full-system oracle -----------------------------------------------------

MAX_ORACLE_DIM = 12


@dataclass
class OracleTerms:
    phi0: np.ndarray
    Psi0: np.ndarray
    chi0: float
    Psi_t: Optional[np.ndarray] = None     # (len(t_eval), N*n) when requested


def full_system_oracle(spec: ProblemSpec, N, lam, X0, dt=None, rtol=1e-12, t_eval=None):
    """Value ``V^N(0, lam)`` from the undecomposed ``Nn``-dimensional system.

    Integrates the full Riccati matrix, the stacked affine term and the
    scalar term with an adaptive 8th-order method (independent of the RK4
    path used elsewhere). Intended for tiny instances only.
    """
    spec.check()
    n, D = spec.n, spec.D
    Nn = N * n
    if Nn > MAX_ORACLE_DIM:
        raise CCTError(f"oracle size cap exceeded: N*n={Nn} > {MAX_ORACLE_DIM}")
    lam = np.asarray(lam, dtype=int)
    X0 = np.asarray(X0, dtype=float).reshape(N, n)
    if lam.shape != (N,) or np.any(lam < 0) or np.any(lam >= D):
        raise ValueError("assignment must hold N indices in [0, D)")
    IN = np.eye(N)
    ones = np.ones((N, N))
    Q = np.kron(IN, spec.R_d - spec.R_x) + np.kron(ones, spec.R_x) / N
    SN = np.kron(IN, spec.S)
    AN = np.kron(IN, spec.A)
    RdN = np.kron(IN, spec.R_d)
    MN = np.kron(IN, spec.M)
    d = spec.destinations[lam].reshape(-1)
    Rd_d = RdN @ d
    dRd = d @ Rd_d

    def rhs(t, y):
        phi = y[:Nn * Nn].reshape(Nn, Nn)
        Psi = y[Nn * Nn:Nn * Nn + Nn]
        dphi = phi.T @ SN @ phi - phi @ AN - AN.T @ phi - Q
        dPsi = (phi @ SN - AN.T) @ Psi + Rd_d
        dchi = (Psi @ SN @ Psi - dRd) / (2.0 * N)
        return np.concatenate([dphi.ravel(), dPsi, [dchi]])

    yT = np.concatenate([MN.ravel(), -MN @ d, [(d @ MN @ d) / (2.0 * N)]])
    max_step = np.inf if dt is None else 10 * dt
    sol = solve_ivp(rhs, (spec.T, 0.0), yT, method="DOP853", rtol=rtol,
                    atol=rtol * max(1.0, float(np.max(np.abs(yT)))), max_step=max_step,
                    dense_output=t_eval is not None)
    if sol.status != 0 or not np.all(np.isfinite(sol.y[:, -1])):
        raise EscapeDetected(sol.t[-1])
    y0 = sol.y[:, -1]
    phi0 = y0[:Nn * Nn].reshape(Nn, Nn)
    if np.max(np.abs(phi0)) > BLOWUP:
        raise EscapeDetected(0.0)
    Psi0 = y0[Nn * Nn:Nn * Nn + Nn]
    chi0 = float(y0[-1])
    X = X0.reshape(-1)
    cost = float(X @ phi0 @ X / (2.0 * N) + Psi0 @ X / N + chi0)
    Psi_t = None
    if t_eval is not None:
        Psi_t = sol.sol(np.asarray(t_eval, dtype=float))[Nn * Nn:Nn * Nn + Nn].T
    return cost, OracleTerms(phi0, Psi0, chi0, Psi_t)
