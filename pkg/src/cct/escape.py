"""Escape time of the limiting indefinite Riccati equation.

The escape time is read off the first zero of

    Delta(t, phi0) = det[I + int_0^t e^{Ab p} S e^{Ab' p} dp (M - phi0)],
    Ab = A - S phi0,  Ab' = A^T - phi0 S,

where ``phi0`` is a real solution of the algebraic equation
``phi S phi - phi A - A^T phi - (R_d - R_x) = 0`` (not necessarily
symmetric). Without a real solution, the Riccati equation is integrated
backward directly and the blow-up instant is bisected.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import eig, expm, schur
from scipy.linalg.lapack import dtrsen
from scipy.integrate import solve_ivp
from scipy.optimize import brentq, minimize, minimize_scalar

from .errors import HorizonInfeasible, NoRealEquilibrium
from .model import ProblemSpec

BISECT_TOL = 1e-6
MAX_SUBSETS = 512


@dataclass
class DeltaScan:
    t: np.ndarray
    delta: np.ndarray
    first_zero: Optional[float] = None


@dataclass
class EscapeReport:
    equilibrium: Optional[np.ndarray]
    escape_time: float
    horizon_ok: bool
    margin: float
    T: float
    method: str = "criterion"
    touching: bool = False
    t_max: float = math.inf
    scan: Optional[DeltaScan] = field(default=None, repr=False)


def _Q(spec):
    return spec.R_d - spec.R_x


def equilibrium_residual(spec, phi0):
    S, A = spec.S, spec.A
    return float(np.linalg.norm(phi0 @ S @ phi0 - phi0 @ A - A.T @ phi0 - _Q(spec)))


def _residual_scale(spec):
    return (np.linalg.norm(spec.A) + np.linalg.norm(spec.S) + np.linalg.norm(_Q(spec))
            + 1.0)


def _schur_blocks(T):
    """Start index and size of each diagonal block of a real Schur form."""
    blocks = []
    i, n = 0, T.shape[0]
    while i < n:
        if i + 1 < n and T[i + 1, i] != 0.0:
            blocks.append((i, 2))
            i += 2
        else:
            blocks.append((i, 1))
            i += 1
    return blocks


def riccati_equilibria(spec: ProblemSpec, max_subsets=MAX_SUBSETS):
    """All real equilibria reachable from invariant subspaces of the Hamiltonian.

    Each candidate selects Schur blocks of total dimension ``n``, reorders
    them to the top with ``dtrsen`` and reads ``phi = V2 V1^{-1}``.
    Results are ordered: symmetric first, then fewer selected eigenvalues
    in the right half plane, then smaller residual.
    """
    n = spec.n
    A, S, Q = spec.A, spec.S, _Q(spec)
    Hm = np.block([[A, -S], [-Q, -A.T]])
    T, Z = schur(Hm, output="real")
    blocks = _schur_blocks(T)
    tol = 1e-8 * _residual_scale(spec)
    found = []
    combos = (c for r in range(1, len(blocks) + 1)
              for c in itertools.combinations(range(len(blocks)), r)
              if sum(blocks[b][1] for b in c) == n)
    for combo in itertools.islice(combos, max_subsets):
        select = np.zeros(2 * n, dtype=np.int32)
        for b in combo:
            i0, sz = blocks[b]
            select[i0:i0 + sz] = 1
        ts, qs, wr, wi, msel, _, _, info = dtrsen(select, T, Z, job="N")
        if info != 0:
            continue
        V1, V2 = qs[:n, :n], qs[n:, :n]
        if np.linalg.cond(V1) > 1e12:
            continue
        phi = np.linalg.solve(V1.T, V2.T).T
        res = equilibrium_residual(spec, phi)
        if res > tol:
            continue
        if any(np.allclose(phi, f, atol=1e-9 * (1 + np.max(np.abs(f)))) for f in found):
            continue
        found.append(phi)
    if not found and n == 2:
        found = _repeated_pair_equilibria(spec, Hm, tol)
    if not found:
        raise NoRealEquilibrium("no invariant subspace yields a real equilibrium")

    def key(phi):
        asym = np.max(np.abs(phi - phi.T)) > 1e-9 * (1 + np.max(np.abs(phi)))
        eig = np.linalg.eigvals(A - S @ phi)
        unstable = int(np.sum(eig.real > 1e-12))
        return (asym, unstable, equilibrium_residual(spec, phi))

    return sorted(found, key=key)


def _repeated_pair_equilibria(spec, Hm, tol):
    """Planar case with a repeated complex pair.

    The eigenspace of a repeated eigenvalue ``lam`` holds a family of
    two-dimensional real invariant subspaces ``span(Re v, Im v)``. The
    Schur basis may pick a degenerate member, so the family is searched
    directly for the member with the smallest Frobenius norm.
    """
    n = 2
    w, V = eig(Hm)
    found = []
    for lam in w[w.imag > 1e-14]:
        idx = np.flatnonzero(np.abs(w - lam) <= 1e-8 * (1.0 + abs(lam)))
        if idx.size < 2:
            continue
        W = V[:, idx[:2]]

        def phi_of(z):
            v = W @ np.array([1.0, z[0] + 1j * z[1]])
            X = np.column_stack([v.real, v.imag])
            if np.linalg.cond(X[:n]) > 1e12:
                return None
            return np.linalg.solve(X[:n].T, X[n:].T).T

        def size(z):
            phi = phi_of(z)
            return 1e300 if phi is None else np.linalg.norm(phi)

        for z0 in ((0.0, 1.0), (0.0, -1.0), (1.0, 0.0)):
            r = minimize(size, z0, method="Nelder-Mead",
                         options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 4000})
            phi = phi_of(r.x)
            if phi is None:
                continue
            # snap entries that are zero up to optimizer noise
            scale = np.max(np.abs(phi))
            phi = np.where(np.abs(phi) < 1e-9 * scale, 0.0, phi)
            if equilibrium_residual(spec, phi) > tol:
                continue
            if any(np.allclose(phi, f, atol=1e-6 * (1 + np.max(np.abs(f)))) for f in found):
                continue
            found.append(phi)
    return found


def riccati_equilibrium(spec: ProblemSpec):
    """A real equilibrium, preferring symmetric and stabilizing solutions."""
    return riccati_equilibria(spec)[0]


class _DeltaOperator:
    """Evaluates ``Delta(t, phi0)`` exactly via a block matrix exponential.

    With ``C = [[-Ab, S], [0, Ab']]`` the top-right block of ``expm(C t)``
    is ``e^{-Ab t} int_0^t e^{Ab p} S e^{Ab' p} dp``.
    """

    def __init__(self, spec, phi0):
        n = spec.n
        self.n = n
        S = spec.S
        self.Ab = spec.A - S @ phi0
        Abp = spec.A.T - phi0 @ S
        self.C = np.block([[-self.Ab, S], [np.zeros((n, n)), Abp]])
        self.Mphi = spec.M - phi0

    def gramian(self, t):
        n = self.n
        E = expm(self.C * t)
        return expm(self.Ab * t) @ E[:n, n:]

    def __call__(self, t):
        if t == 0.0:
            return 1.0
        return float(np.linalg.det(np.eye(self.n) + self.gramian(t) @ self.Mphi))


def _scan_zero(delta, t_max, scan_dt):
    """First zero of ``delta`` on ``(0, t_max]``; returns ``(t, touching, scan)``."""
    K = max(2, int(math.ceil(t_max / scan_dt)))
    ts = np.linspace(0.0, t_max, K + 1)
    vals = np.empty(ts.size)
    vals[0] = delta(0.0)
    scale = 1.0
    for k in range(1, ts.size):
        vals[k] = delta(ts[k])
        scale = max(scale, abs(vals[k - 1]))
        if vals[k] == 0.0:
            return ts[k], False, DeltaScan(ts[:k + 1], vals[:k + 1], ts[k])
        if np.sign(vals[k]) != np.sign(vals[k - 1]):
            z = brentq(delta, ts[k - 1], ts[k], xtol=BISECT_TOL * 1e-3, rtol=1e-15)
            return z, False, DeltaScan(ts[:k + 1], vals[:k + 1], z)
        # local minimum of |Delta| inside [t_{k-2}, t_k]: look for a tangential zero
        if k >= 2 and abs(vals[k - 1]) <= abs(vals[k - 2]) and abs(vals[k - 1]) <= abs(vals[k]):
            lo, hi = ts[k - 2], ts[k]
            r = minimize_scalar(lambda s: abs(delta(s)), bounds=(lo, hi), method="bounded",
                                options={"xatol": BISECT_TOL * 1e-3})
            if abs(r.fun) <= 1e-8 * scale:
                return float(r.x), True, DeltaScan(ts[:k + 1], vals[:k + 1], float(r.x))
            if np.sign(delta(r.x)) != np.sign(vals[k - 1]):
                z = brentq(delta, lo, r.x, xtol=BISECT_TOL * 1e-3)
                return z, False, DeltaScan(ts[:k + 1], vals[:k + 1], z)
    return None, False, DeltaScan(ts, vals, None)


def escape_by_integration(spec: ProblemSpec, t_max, threshold=1e6, rtol=1e-10):
    """Backward integration of the limiting Riccati equation until blow-up.

    An adaptive integrator runs in reversed time ``tau = T - t`` until
    ``|phi|`` reaches ``threshold``. Near the pole ``phi`` behaves like
    ``-1 / (s (tau* - tau))`` along the dominant direction of ``S``, which
    gives the remaining distance to the pole. Returns ``inf`` when no
    blow-up occurs before ``t_max``.
    """
    n = spec.n
    A, S, Q = spec.A, spec.S, _Q(spec)
    w, U = np.linalg.eigh(S)
    Sh = (U * np.sqrt(np.clip(w, 0.0, None))) @ U.T

    def f(_, y):
        phi = y.reshape(n, n)
        # reversed time: d phi / d tau = -(d phi / d t)
        return (phi @ A + A.T @ phi + Q - phi @ S @ phi).ravel()

    def hit(_, y):
        return threshold - np.max(np.abs(y))

    hit.terminal = True
    sol = solve_ivp(f, (0.0, t_max), np.asarray(spec.M, dtype=float).ravel(),
                    method="DOP853", rtol=rtol, atol=1e-12, events=hit)
    if sol.status != 1 or not sol.t_events[0].size:
        return math.inf
    tau = float(sol.t_events[0][0])
    phi = sol.y_events[0][0].reshape(n, n)
    lead = np.max(np.abs(np.linalg.eigvalsh(Sh @ (0.5 * (phi + phi.T)) @ Sh)))
    return tau + 1.0 / max(lead, 1.0 / threshold)


def escape_time(spec: ProblemSpec, scan_dt=None, t_max=None, T=None):
    """Escape time of the limiting Riccati equation with an ``EscapeReport``."""
    T = spec.T if T is None else T
    t_max = 10.0 * T if t_max is None else t_max
    scan_dt = 1e-3 * max(1.0, t_max) if scan_dt is None else scan_dt
    try:
        eqs = riccati_equilibria(spec)
    except NoRealEquilibrium:
        eqs = []
    if eqs:
        phi0 = eqs[0]
        z, touching, scan = _scan_zero(_DeltaOperator(spec, phi0), t_max, scan_dt)
        esc = math.inf if z is None else float(z)
        method = "criterion"
    else:
        phi0, touching, scan = None, False, None
        esc = escape_by_integration(spec, t_max)
        method = "integration"
    return EscapeReport(equilibrium=phi0, escape_time=esc, horizon_ok=bool(T < esc),
                        margin=esc - T, T=T, method=method, touching=touching,
                        t_max=t_max, scan=scan)


def delta_operator(spec, phi0):
    """Callable ``t -> Delta(t, phi0)``."""
    return _DeltaOperator(spec, phi0)


def assert_horizon(spec: ProblemSpec, override=False, **kw) -> EscapeReport:
    """Certify ``T < escape time``; raises :class:`HorizonInfeasible` otherwise."""
    report = escape_time(spec, **kw)
    if not report.horizon_ok and not override:
        raise HorizonInfeasible(spec.T, report.escape_time)
    return report
