"""Problem instances, initial distributions and simplex points."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Union

import numpy as np

from .errors import SpecError

SIMPLEX_TOL = 1e-12
PSD_TOL = 1e-12


def _frozen(a, ndim=None):
    arr = np.array(a, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class UniformBox:
    """Uniform distribution on the box ``[lower, upper]``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lower", _frozen(self.lower, 1))
        object.__setattr__(self, "upper", _frozen(self.upper, 1))

    @property
    def dim(self):
        return self.lower.shape[0]

    def violations(self, n):
        out = []
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            out.append(f"dimension mismatch: box bounds must have dimension {n}")
        elif not np.all(self.lower < self.upper):
            out.append("box lower bound must be strictly below upper bound")
        return out


@dataclass(frozen=True)
class Empirical:
    """Uniform measure on a finite list of points (repeats allowed)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def dim(self):
        return self.points.shape[1]

    def violations(self, n):
        out = []
        if self.points.shape[0] < 1:
            out.append("empirical distribution needs at least one point")
        if self.points.shape[1] != n:
            out.append(f"dimension mismatch: empirical points must have dimension {n}")
        return out


InitialDistribution = Union[UniformBox, Empirical]


class SimplexVector:
    """A point of the probability simplex.

    Construction rejects vectors that are off the simplex by more than
    ``SIMPLEX_TOL`` in either the sum or a negative component.
    """

    __slots__ = ("p",)

    def __init__(self, p, tol=SIMPLEX_TOL):
        arr = np.array(p, dtype=float).reshape(-1)
        if arr.size == 0:
            raise ValueError("empty simplex vector")
        if np.any(arr < -tol) or abs(arr.sum() - 1.0) > tol:
            raise ValueError(f"vector {arr} is not on the probability simplex")
        arr = np.maximum(arr, 0.0)
        arr.setflags(write=False)
        self.p = arr

    @classmethod
    def from_counts(cls, counts):
        counts = np.asarray(counts)
        return cls(counts / counts.sum())

    def __array__(self, dtype=None, copy=None):
        return self.p if dtype is None else self.p.astype(dtype)

    def __len__(self):
        return self.p.size

    def __getitem__(self, item):
        return self.p[item]

    def __iter__(self):
        return iter(self.p)

    def __repr__(self):
        return f"SimplexVector({self.p.tolist()})"

    def __eq__(self, other):
        return isinstance(other, SimplexVector) and np.array_equal(self.p, other.p)

    def __hash__(self):
        return hash(self.p.tobytes())


def as_simplex(P):
    return P if isinstance(P, SimplexVector) else SimplexVector(P)


@dataclass(frozen=True)
class ProblemSpec:
    """A full model instance.

    Matrices are stored as read-only float arrays. ``destinations`` is a
    ``(D, n)`` array. Use :func:`validate_spec` (or :meth:`check`) before
    handing an instance to the solvers.
    """

    A: np.ndarray
    B: np.ndarray
    R_x: np.ndarray
    R_d: np.ndarray
    R_u: np.ndarray
    M: np.ndarray
    destinations: np.ndarray
    T: float
    dist: InitialDistribution = field(default=None)

    def __post_init__(self):
        for name in ("A", "B", "R_x", "R_d", "R_u", "M"):
            object.__setattr__(self, name, _frozen(np.atleast_2d(getattr(self, name))))
        d = np.array(self.destinations, dtype=float)
        if d.ndim == 1:
            d = d[None, :]
        d.setflags(write=False)
        object.__setattr__(self, "destinations", d)
        object.__setattr__(self, "T", float(self.T))

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def D(self):
        return self.destinations.shape[0]

    @cached_property
    def S(self):
        """``B R_u^{-1} B^T``."""
        S = self.B @ np.linalg.solve(self.R_u, self.B.T)
        S = 0.5 * (S + S.T)
        S.setflags(write=False)
        return S

    @cached_property
    def R_u_inv_Bt(self):
        K = np.linalg.solve(self.R_u, self.B.T)
        K.setflags(write=False)
        return K

    def check(self):
        report = validate_spec(self)
        if not report.ok:
            raise SpecError(report.violations)
        return self

    def replace(self, **changes):
        fields = dict(A=self.A, B=self.B, R_x=self.R_x, R_d=self.R_d, R_u=self.R_u,
                      M=self.M, destinations=self.destinations, T=self.T, dist=self.dist)
        fields.update(changes)
        return ProblemSpec(**fields)


@dataclass
class ValidationReport:
    violations: list

    @property
    def ok(self):
        return not self.violations

    def __bool__(self):
        return self.ok


def _is_symmetric(X):
    scale = max(1.0, float(np.max(np.abs(X))))
    return np.allclose(X, X.T, rtol=0.0, atol=1e-12 * scale)


def _psd(X):
    w = np.linalg.eigvalsh(0.5 * (X + X.T))
    scale = max(float(np.max(np.abs(w))), np.finfo(float).tiny)
    return bool(np.all(w >= -PSD_TOL * scale))


def _pd(X):
    try:
        np.linalg.cholesky(0.5 * (X + X.T))
    except np.linalg.LinAlgError:
        return False
    return True


def validate_spec(spec: ProblemSpec) -> ValidationReport:
    """Collect every violation of the instance invariants.

    An empty report means the instance is valid; ``spec.S`` is computed
    (and cached) as a side effect in that case.
    """
    v = []
    n = spec.A.shape[0]
    if spec.A.shape != (n, n):
        v.append(f"dimension mismatch: A must be square, got {spec.A.shape}")
    if spec.B.shape[0] != n:
        v.append(f"dimension mismatch: B must have {n} rows, got {spec.B.shape}")
    m = spec.B.shape[1]
    for name, shape in (("R_x", (n, n)), ("R_d", (n, n)), ("M", (n, n)), ("R_u", (m, m))):
        X = getattr(spec, name)
        if X.shape != shape:
            v.append(f"dimension mismatch: {name} must be {shape[0]}x{shape[1]}, got "
                     f"{X.shape[0]}x{X.shape[1]}")
            continue
        if not np.all(np.isfinite(X)):
            v.append(f"{name} has non-finite entries")
            continue
        if not _is_symmetric(X):
            v.append(f"{name} not symmetric")
        if name in ("R_u", "M"):
            if not _pd(X):
                v.append(f"{name} not positive definite")
        elif not _psd(X):
            v.append(f"{name} not positive semidefinite")
    if spec.destinations.size == 0 or spec.destinations.shape[0] < 1:
        v.append("empty destination list")
    elif spec.destinations.shape[1] != n:
        v.append(f"dimension mismatch: destinations must have dimension {n}, got "
                 f"{spec.destinations.shape[1]}")
    if not (np.isfinite(spec.T) and spec.T > 0):
        v.append("horizon T must be a positive real")
    if spec.dist is None:
        v.append("missing initial distribution")
    else:
        v.extend(spec.dist.violations(n))
    if not v:
        _ = spec.S
    return ValidationReport(v)


def moments(dist, Q=None):
    """Return ``(mean, int x^T Q x dP0, int |x|^2 dP0)``."""
    if isinstance(dist, UniformBox):
        mean = 0.5 * (dist.lower + dist.upper)
        var = (dist.upper - dist.lower) ** 2 / 12.0
        second_mat = np.diag(var) + np.outer(mean, mean)
    else:
        pts = dist.points
        mean = pts.mean(axis=0)
        second_mat = pts.T @ pts / pts.shape[0]
    Q = np.eye(mean.size) if Q is None else np.asarray(Q, dtype=float)
    quad = float(np.sum(Q * second_mat))
    second = float(np.trace(second_mat))
    return mean, quad, second


def sample_initial_states(dist, N, seed):
    """Draw ``N`` initial states; deterministic given ``seed``.

    An empirical distribution with exactly ``N`` points returns its points
    verbatim; otherwise points are drawn with replacement.
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    rng = np.random.default_rng(seed)
    if isinstance(dist, UniformBox):
        return dist.lower + (dist.upper - dist.lower) * rng.random((N, dist.dim))
    pts = dist.points
    if pts.shape[0] == N:
        return pts.copy()
    return pts[rng.integers(0, pts.shape[0], size=N)].copy()


def planar_instance(T=3.0):
    """The two-destination planar instance used in the numerical experiments."""
    I = np.eye(2)
    return ProblemSpec(
        A=np.zeros((2, 2)), B=I, R_x=I, R_d=0.1 * I, R_u=50 * I, M=400 * I,
        destinations=[[-5.0, -3.0], [7.0, 8.0]], T=T,
        dist=UniformBox([-50.0, -50.0], [50.0, 50.0]),
    )
