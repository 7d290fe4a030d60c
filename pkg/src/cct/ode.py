"""Fixed-step RK4 on uniform grids and piecewise-linear sampled functions."""

from __future__ import annotations

import numpy as np

NODE_SNAP = 1e-9   # times this close (in steps) to a node read the node sample


class TimeGrid:
    """Samples of a function on a uniform grid over ``[0, T]``.

    ``values[k]`` is the sample at ``t[k]``; evaluation between nodes is
    piecewise linear and returns the stored sample exactly at a node.
    """

    def __init__(self, t, values):
        self.t = np.asarray(t, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.values.shape[0] != self.t.size:
            raise ValueError("one sample per grid node required")

    @property
    def dt(self):
        return self.t[1] - self.t[0]

    @property
    def T(self):
        return self.t[-1]

    def __len__(self):
        return self.t.size

    def __getitem__(self, k):
        return self.values[k]

    def __call__(self, t):
        return interp_uniform(self.t, self.values, t)

    def at(self, ts):
        """Vectorized evaluation at the times ``ts`` (same rule as ``__call__``)."""
        ts = np.asarray(ts, dtype=float)
        h = self.t[1] - self.t[0]
        s = (ts - self.t[0]) / h
        r = np.round(s)
        s = np.where(np.abs(s - r) <= NODE_SNAP * np.maximum(1.0, np.abs(s)), r, s)
        k = np.clip(np.floor(s).astype(int), 0, self.t.size - 2)
        w = (s - k).reshape((-1,) + (1,) * (self.values.ndim - 1))
        return (1.0 - w) * self.values[k] + w * self.values[k + 1]


def uniform_grid(T, dt):
    """Nodes ``0, h, ..., T`` with ``round(T/dt)`` steps (``h`` adjusted to land on ``T``)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    K = max(1, int(round(T / dt)))
    t = np.linspace(0.0, T, K + 1)
    return t


def interp_uniform(t_nodes, values, t):
    h = t_nodes[1] - t_nodes[0]
    s = (t - t_nodes[0]) / h
    r = round(s)
    if abs(s - r) <= NODE_SNAP * max(1.0, abs(s)):
        s = float(r)
    k = int(np.floor(s))
    k = min(max(k, 0), t_nodes.size - 2)
    w = s - k
    if w == 0.0:
        return values[k]
    if w == 1.0:
        return values[k + 1]
    return (1.0 - w) * values[k] + w * values[k + 1]


def rk4_step(f, t, y, h):
    k1 = f(t, y)
    k2 = f(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = f(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_forward(f, y0, t):
    """Integrate ``y' = f(t, y)`` forward over the nodes ``t``; returns all states."""
    y0 = np.asarray(y0, dtype=float)
    out = np.empty((t.size,) + y0.shape)
    out[0] = y0
    y = y0
    for k in range(t.size - 1):
        y = rk4_step(f, t[k], y, t[k + 1] - t[k])
        out[k + 1] = y
    return out
