"""Discrete and semi-discrete optimal transport to a finite set of sites.

The discrete problem is solved with the transportation simplex. The
semi-discrete problem is solved in the dual, over power weights ``g``,
by projected supergradient ascent; cell measures are computed with a
midpoint tensor grid for box distributions and by counting for
empirical ones.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InfeasibleMarginals, MaxIterExceeded, UnsupportedDimension
from .model import Empirical, UniformBox, as_simplex, moments

EPS = 1e-12
BLAND_AFTER = 50          # consecutive degenerate pivots before Bland's rule
MAX_GRID_DIM = 3
_NODES_PER_AXIS = {1: 1 << 20, 2: 1024, 3: 128}
_CHUNK = 1 << 18


# ---------------------------------------------------------------- projections

def project_simplex(v):
    """Euclidean projection onto the probability simplex (sort and threshold)."""
    v = np.asarray(v, dtype=float).reshape(-1)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    w = np.maximum(v - theta, 0.0)
    return as_simplex(w / w.sum())


def project_ball(g, radius):
    if radius <= 0:
        raise ValueError("radius must be positive")
    g = np.asarray(g, dtype=float)
    norm = np.linalg.norm(g)
    if norm <= radius:
        return g.copy()
    return g * (radius / norm)


# ------------------------------------------------------------ discrete OT

@dataclass
class TransportPlan:
    gamma: np.ndarray
    value: float
    assignment: Optional[np.ndarray] = None


def _col_marginals(P):
    P = np.asarray(P, dtype=float).reshape(-1)
    if not np.all(np.isfinite(P)) or abs(P.sum() - 1.0) > 1e-10 or np.any(P < -1e-12):
        raise InfeasibleMarginals(f"column marginals {P} do not form a probability vector")
    return np.maximum(P, 0.0)


def _northwest(supply, demand, order):
    """Northwest-corner basis (N + D - 1 cells, degenerate ones included)."""
    N, D = supply.size, demand.size
    a, b = supply.copy(), demand.copy()
    x = {}
    ii, j = 0, 0
    tol = EPS * max(1.0, supply.sum())
    while ii < N and j < D:
        i = order[ii]
        q = min(a[i], b[j])
        x[(i, j)] = q
        a[i] -= q
        b[j] -= q
        if ii == N - 1 and j == D - 1:
            break
        if a[i] <= tol and ii < N - 1:
            ii += 1
        elif j < D - 1:
            j += 1
        else:
            ii += 1
    return x


class _Tree:
    """The basis as a spanning tree on rows ``0..N-1`` and columns ``N..N+D-1``."""

    def __init__(self, N, D, cells):
        self.N, self.D = N, D
        self.adj = [set() for _ in range(N + D)]
        for i, j in cells:
            self.add(i, j)

    def add(self, i, j):
        self.adj[i].add(self.N + j)
        self.adj[self.N + j].add(i)

    def remove(self, i, j):
        self.adj[i].discard(self.N + j)
        self.adj[self.N + j].discard(i)

    def potentials(self, c):
        N = self.N
        u = np.full(N, np.nan)
        v = np.full(self.D, np.nan)
        u[0] = 0.0
        queue = deque([0])
        while queue:
            a = queue.popleft()
            for b in self.adj[a]:
                if a < N:
                    if np.isnan(v[b - N]):
                        v[b - N] = c[a, b - N] - u[a]
                        queue.append(b)
                elif np.isnan(u[b]):
                    u[b] = c[b, a - N] - v[a - N]
                    queue.append(b)
        return u, v

    def path(self, src, dst):
        prev = {src: None}
        queue = deque([src])
        while queue:
            a = queue.popleft()
            if a == dst:
                break
            for b in self.adj[a]:
                if b not in prev:
                    prev[b] = a
                    queue.append(b)
        nodes = [dst]
        while prev[nodes[-1]] is not None:
            nodes.append(prev[nodes[-1]])
        return nodes[::-1]


def _cell(N, a, b):
    return (a, b - N) if a < N else (b, a - N)


def discrete_ot(costs, col_marginals, max_pivots=None) -> TransportPlan:
    """Optimal plan between ``N`` equal-mass points and ``D`` sites.

    Rows carry mass ``1/N``, columns ``P_j``. The simplex runs on the
    scaled problem (row supply 1, column demand ``N P_j``); when every
    ``N P_j`` is an integer the basic optimal solution is integral and the
    assignment is returned as well.
    """
    c = np.asarray(costs, dtype=float)
    if c.ndim != 2 or not np.all(np.isfinite(c)):
        raise ValueError("costs must be a finite N x D matrix")
    P = _col_marginals(col_marginals)
    N, D = c.shape
    if P.size != D:
        raise ValueError(f"{D} columns but {P.size} marginals")
    supply = np.ones(N)
    demand = N * P
    demand[-1] = N - demand[:-1].sum()
    if D == 1:
        gamma = np.full((N, 1), 1.0 / N)
        return TransportPlan(gamma, float(c[:, 0].mean()), np.zeros(N, dtype=int))

    # rows ordered by preference for the first over the last column; with two
    # columns the northwest-corner start is then already optimal
    order = np.argsort(c[:, 0] - c[:, -1], kind="stable")
    x = _northwest(supply, demand, order)
    tree = _Tree(N, D, x)
    scale = max(1.0, float(np.max(np.abs(c))))
    max_pivots = max_pivots or 50 * (N + D) * D + 1000
    degenerate = 0
    for _ in range(max_pivots):
        u, v = tree.potentials(c)
        red = c - u[:, None] - v[None, :]
        for (i, j) in x:
            red[i, j] = 0.0
        bland = degenerate >= BLAND_AFTER
        if bland:
            neg = np.argwhere(red < -EPS * scale)
            if neg.size == 0:
                break
            i, j = map(int, neg[0])
        else:
            k = int(np.argmin(red))
            i, j = divmod(k, D)
            if red[i, j] >= -EPS * scale:
                break
        nodes = tree.path(N + j, i)
        edges = [_cell(N, nodes[k], nodes[k + 1]) for k in range(len(nodes) - 1)]
        minus = edges[0::2]
        plus = edges[1::2]
        theta = min(x[e] for e in minus)
        ties = [e for e in minus if x[e] <= theta + EPS]
        leave = min(ties) if bland else ties[0]
        for e in minus:
            x[e] -= theta
        for e in plus:
            x[e] += theta
        x[(i, j)] = theta
        del x[leave]
        tree.add(i, j)
        tree.remove(*leave)
        degenerate = degenerate + 1 if theta <= EPS else 0
    else:
        raise MaxIterExceeded("transportation simplex did not terminate")

    X = np.zeros((N, D))
    for (i, j), q in x.items():
        X[i, j] = max(q, 0.0)
    assignment = None
    if np.allclose(demand, np.round(demand), atol=1e-9):
        Xr = np.round(X)
        if np.allclose(X, Xr, atol=1e-9) and np.all(Xr.sum(axis=1) == 1):
            X = Xr
            assignment = np.argmax(X, axis=1)
    gamma = X / N
    return TransportPlan(gamma, float(np.sum(c * gamma)), assignment)


# ------------------------------------------------------- semi-discrete OT

def _sites(beta0):
    B = np.asarray(beta0, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    return B


class BoxQuadrature:
    """Midpoint tensor grid for the uniform law on a box (equal weights)."""

    def __init__(self, lower, upper, per_axis=None, max_dim=MAX_GRID_DIM):
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        n = lower.size
        if n > max_dim:
            raise UnsupportedDimension(
                f"tensor quadrature supports dimension <= {max_dim}, got {n}")
        self.per_axis = int(per_axis or _NODES_PER_AXIS[n])
        h = (upper - lower) / self.per_axis
        axes = [lower[k] + h[k] * (np.arange(self.per_axis) + 0.5) for k in range(n)]
        mesh = np.meshgrid(*axes, indexing="ij")
        self.nodes = np.column_stack([m.ravel() for m in mesh])
        self.weights = None
        self._sorted = {}

    def sorted_projection(self, w):
        """Nodes sorted by ``2 x.w`` with prefix sums of the nodes (cached)."""
        key = w.tobytes()
        hit = self._sorted.get(key)
        if hit is None:
            proj = 2.0 * (self.nodes @ w)
            idx = np.argsort(proj, kind="stable")
            xs = self.nodes[idx]
            csum = np.vstack([np.zeros(xs.shape[1]), np.cumsum(xs, axis=0)])
            hit = (proj[idx], csum)
            if len(self._sorted) > 8:
                self._sorted.clear()
            self._sorted[key] = hit
        return hit


_QUAD_CACHE = {}


def box_quadrature(dist: UniformBox, per_axis=None):
    key = (dist.lower.tobytes(), dist.upper.tobytes(), per_axis)
    q = _QUAD_CACHE.get(key)
    if q is None:
        if len(_QUAD_CACHE) > 4:
            _QUAD_CACHE.clear()
        q = _QUAD_CACHE[key] = BoxQuadrature(dist.lower, dist.upper, per_axis)
    return q


def _nodes(dist, per_axis=None):
    if isinstance(dist, UniformBox):
        return box_quadrature(dist, per_axis)
    if isinstance(dist, Empirical):
        return None
    raise TypeError(f"unsupported distribution {type(dist).__name__}")


def _power_terms(X, B, g):
    """``-2 x.b_j + |b_j|^2 - g_j``: the power distance without ``|x|^2``."""
    return -2.0 * (X @ B) + (np.sum(B * B, axis=0) - g)[None, :]


def _generic(X, B, g):
    """Cell counts and ``sum_x min_j`` of the power terms, chunked."""
    D = B.shape[1]
    counts = np.zeros(D)
    total = 0.0
    for s in range(0, X.shape[0], _CHUNK):
        F = _power_terms(X[s:s + _CHUNK], B, g)
        lab = np.argmin(F, axis=1)
        counts += np.bincount(lab, minlength=D)
        total += float(F[np.arange(F.shape[0]), lab].sum())
    return counts, total


def _two_sites(quad, B, g):
    """Same as :func:`_generic` for two sites, from a cached sort."""
    w = B[:, 1] - B[:, 0]
    proj, csum = quad.sorted_projection(w)
    sq = np.sum(B * B, axis=0)
    tau = sq[1] - sq[0] + g[0] - g[1]
    k = int(np.searchsorted(proj, tau, side="right"))   # ties go to the first site
    K = proj.size
    s1, s2 = csum[k], csum[-1] - csum[k]
    total = (-2.0 * s1 @ B[:, 0] + k * (sq[0] - g[0])
             - 2.0 * s2 @ B[:, 1] + (K - k) * (sq[1] - g[1]))
    return np.array([k, K - k], dtype=float), float(total)


def _evaluate(dist, beta0, g, per_axis=None, fast=True):
    B = _sites(beta0)
    g = np.asarray(g, dtype=float).reshape(-1)
    if g.size != B.shape[1]:
        raise ValueError("one weight per site required")
    quad = _nodes(dist, per_axis)
    if quad is None:
        X = dist.points
        counts, total = _generic(X, B, g)
        K = X.shape[0]
    elif fast and B.shape[1] == 2:
        counts, total = _two_sites(quad, B, g)
        K = quad.nodes.shape[0]
    else:
        counts, total = _generic(quad.nodes, B, g)
        K = quad.nodes.shape[0]
    return counts / K, total / K


def cell_measures(dist, beta0, g, per_axis=None):
    """Mass of each power cell ``{x : j minimizes |x - beta_j|^2 - g_j}``."""
    return _evaluate(dist, beta0, g, per_axis)[0]


def dual_value(dist, beta0, g, P, per_axis=None):
    """``int min_j(|x - beta_j|^2 - g_j) dP0 + P.g``."""
    g = np.asarray(g, dtype=float).reshape(-1)
    _, total = _evaluate(dist, beta0, g, per_axis)
    if isinstance(dist, Empirical):
        second = float(np.mean(np.sum(dist.points ** 2, axis=1)))
    else:
        second = moments(dist)[2]
    return second + total + float(np.dot(np.asarray(P, dtype=float), g))


def weight_radius(dist, beta0):
    """``sup_{x in E, j} |x - beta_j|^2``, from box corners or the points."""
    B = _sites(beta0)
    if isinstance(dist, UniformBox):
        far = np.where(B > ((dist.lower + dist.upper) / 2)[:, None],
                       dist.lower[:, None], dist.upper[:, None])
        return float(np.max(np.sum((far - B) ** 2, axis=0)))
    X = dist.points
    return float(max(np.max(np.sum((X - B[:, j]) ** 2, axis=1)) for j in range(B.shape[1])))


@dataclass
class PowerWeights:
    g: np.ndarray
    measures: np.ndarray
    sites: np.ndarray
    iterations: int = 0

    def cell(self, x):
        return assign_destination(self.sites, self.g, x)


def _polish(dist, B, g, P, meas, delta, per_axis):
    """Move two-site weights onto the exact dual maximizer of the grid measure.

    With two sites the cells are half-planes split at ``tau`` along the
    sorted projections; the dual is maximized when ``tau`` is the
    projection of the node that carries the ``P_1`` quantile. The shift
    keeps ``mean(g)``, and is skipped if it would break the stopping bound.
    """
    if B.shape[1] != 2 or not isinstance(dist, UniformBox):
        return g, meas
    quad = box_quadrature(dist, per_axis)
    proj, _ = quad.sorted_projection(B[:, 1] - B[:, 0])
    K = proj.size
    k = min(max(int(np.ceil(P[0] * K)) - 1, 0), K - 1)
    sq = np.sum(B * B, axis=0)
    diff = proj[k] - (sq[1] - sq[0])             # g_1 - g_2 at the threshold
    mid = 0.5 * (g[0] + g[1])
    g_new = np.array([mid + 0.5 * diff, mid - 0.5 * diff])
    meas_new = cell_measures(dist, B, g_new, per_axis)
    if np.max(np.abs(P - meas_new)) <= delta:
        return g_new, meas_new
    return g, meas


def solve_semidiscrete(dist, beta0, P, s_in, delta, max_iter=100_000, g0=None,
                       per_axis=None):
    """Projected supergradient ascent on the dual, with a fixed step.

    Iterates ``g <- Proj_G(g + s_in (P - measures(g)))`` until
    ``|P - measures(g)|_inf <= delta``. Returns the weights and ``C(P)``,
    the dual value at the final weights.
    """
    if s_in <= 0 or delta <= 0:
        raise ValueError("s_in and delta must be positive")
    B = _sites(beta0)
    P = np.asarray(P, dtype=float).reshape(-1)
    D = B.shape[1]
    if P.size != D:
        raise ValueError(f"{D} sites but {P.size} target masses")
    radius = weight_radius(dist, B) + 1.0
    g = np.zeros(D) if g0 is None else project_ball(np.asarray(g0, dtype=float), radius)
    best = None
    for it in range(int(max_iter) + 1):
        meas = cell_measures(dist, B, g, per_axis)
        gap = P - meas
        err = float(np.max(np.abs(gap)))
        if best is None or err < best[0]:
            best = (err, g.copy(), meas)
        if err <= delta:
            g, meas = _polish(dist, B, g, P, meas, delta, per_axis)
            pw = PowerWeights(g, meas, B, it)
            return pw, dual_value(dist, B, g, P, per_axis)
        if it == max_iter:
            break
        g = project_ball(g + s_in * gap, radius)
    err, g, meas = best
    raise MaxIterExceeded(
        f"semi-discrete ascent stalled at |P - measures|_inf = {err:.3g} after {max_iter} "
        f"iterations", best=PowerWeights(g, meas, B, max_iter))


def assign_destination(beta0, g, x):
    """Index of the power cell containing ``x`` (smallest index on ties)."""
    B = _sites(beta0)
    x = np.asarray(x, dtype=float).reshape(-1)
    d = np.sum((x[:, None] - B) ** 2, axis=0) - np.asarray(g, dtype=float)
    return int(np.argmin(d))
