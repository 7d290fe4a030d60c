"""Command-line entry point: ``cct <command> --config FILE --out DIR``.

Configurations are JSON documents. Every command writes CSV files and a
``summary.txt`` whose last line is ``STATUS=OK`` on success.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from .coeffs import default_dt, solve_limit_coeffs
from .continuum import solve_continuum
from .errors import CCTError, ConfigError
from .escape import assert_horizon, escape_time
from .finite import solve_finite
from .model import Empirical, ProblemSpec, UniformBox, sample_initial_states
from .sim import Continuum, Finite, comparison_experiment, simulate

COMMANDS = ("escape", "solve-finite", "solve-continuum", "simulate", "compare")
SPEC_KEYS = ("n", "m", "A", "B", "R_x", "R_d", "R_u", "M", "destinations", "T", "dist")
OPTIONAL_KEYS = ("solver",)
SOLVER_DEFAULTS = {
    "dt": None,            # coefficient step; None means T / 2000
    "dt_fwd": None,        # simulation step; None means the coefficient step
    "scan_dt": None,
    "t_max": None,
    "s_in": 3500.0,
    "delta": 5e-5,
    "max_iter": 100000,
    "max_outer": 500,
    "kappa": 0.5,
    "path_bound": 0.02,
    "P0": None,
    "g0": None,
    "per_axis": None,
    "cap": 200000,
    "N": 10,
    "N_list": [100, 1000],
    "seeds": list(range(20)),
    "P_grid_step": 0.1,
    "strategy": "continuum",
    "output_stride": 1,    # write every k-th time node of trajectories.csv
}


@dataclass
class RunConfig:
    spec: ProblemSpec
    solver: dict = field(default_factory=lambda: dict(SOLVER_DEFAULTS))
    raw: dict = field(default_factory=dict, repr=False)


def _matrix(doc, key, shape=None):
    try:
        arr = np.array(doc[key], dtype=float)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"key '{key}': not a rectangular numeric array ({exc})") from None
    if arr.ndim != 2:
        raise ConfigError(f"key '{key}': expected a matrix (list of rows)")
    return arr


def _dist(doc):
    if not isinstance(doc, dict):
        raise ConfigError("key 'dist': expected an object")
    unknown = set(doc) - {"kind", "bounds", "points"}
    if unknown:
        raise ConfigError(f"unknown key(s) in 'dist': {sorted(unknown)}")
    kind = doc.get("kind")
    if kind == "uniform_box":
        if "bounds" not in doc:
            raise ConfigError("missing key 'dist.bounds'")
        b = np.array(doc["bounds"], dtype=float)
        if b.ndim != 2 or b.shape[1] != 2:
            raise ConfigError("key 'dist.bounds': expected one [lower, upper] pair per axis")
        return UniformBox(b[:, 0], b[:, 1])
    if kind == "empirical":
        if "points" not in doc:
            raise ConfigError("missing key 'dist.points'")
        return Empirical(np.array(doc["points"], dtype=float))
    raise ConfigError(f"key 'dist.kind': expected 'uniform_box' or 'empirical', got {kind!r}")


def config_from_dict(doc) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = set(doc) - set(SPEC_KEYS) - set(OPTIONAL_KEYS)
    if unknown:
        raise ConfigError(f"unknown key(s): {sorted(unknown)}")
    for key in SPEC_KEYS:
        if key not in doc:
            raise ConfigError(f"missing key '{key}'")
    solver = dict(SOLVER_DEFAULTS)
    extra = doc.get("solver", {})
    if not isinstance(extra, dict):
        raise ConfigError("key 'solver': expected an object")
    unknown = set(extra) - set(SOLVER_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown key(s) in 'solver': {sorted(unknown)}")
    solver.update(extra)
    mats = {k: _matrix(doc, k) for k in ("A", "B", "R_x", "R_d", "R_u", "M", "destinations")}
    spec = ProblemSpec(**mats, T=float(doc["T"]), dist=_dist(doc["dist"]))
    n, m = int(doc["n"]), int(doc["m"])
    problems = []
    if spec.A.shape[0] != n:
        problems.append(f"dimension mismatch: n={n} but A is {spec.A.shape[0]}x{spec.A.shape[1]}")
    if spec.B.shape[1] != m:
        problems.append(f"dimension mismatch: m={m} but B is {spec.B.shape[0]}x{spec.B.shape[1]}")
    if problems:
        raise ConfigError("; ".join(problems))
    spec.check()
    return RunConfig(spec, solver, doc)


def parse_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: parse error at line {exc.lineno}, column {exc.colno}: "
                          f"{exc.msg}") from None
    return config_from_dict(doc)


def config_to_dict(cfg: RunConfig) -> dict:
    s = cfg.spec
    if isinstance(s.dist, UniformBox):
        dist = {"kind": "uniform_box",
                "bounds": np.column_stack([s.dist.lower, s.dist.upper]).tolist()}
    else:
        dist = {"kind": "empirical", "points": s.dist.points.tolist()}
    return {"n": s.n, "m": s.m, "A": s.A.tolist(), "B": s.B.tolist(), "R_x": s.R_x.tolist(),
            "R_d": s.R_d.tolist(), "R_u": s.R_u.tolist(), "M": s.M.tolist(),
            "destinations": s.destinations.tolist(), "T": s.T, "dist": dist,
            "solver": dict(cfg.solver)}


def dump_config(cfg: RunConfig, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2)
        fh.write("\n")


# ------------------------------------------------------------------ output

def fmt(x):
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


@dataclass
class Table:
    header: list
    rows: list


def emit_plotdata(table: Table, path):
    """Write a CSV with a header row, LF line endings and 17 significant digits."""
    if not table.rows:
        raise ValueError(f"refusing to write an empty table to {path}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(table.header) + "\n")
        for row in table.rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")
    return path


def _vec(name, k):
    return [f"{name}_{i + 1}" for i in range(k)]


def _write_summary(out, items, status="OK"):
    with open(os.path.join(out, "summary.txt"), "w", encoding="utf-8", newline="\n") as fh:
        for key, val in items:
            if isinstance(val, (list, tuple, np.ndarray)):
                val = "[" + ", ".join(fmt(v) for v in np.ravel(val)) + "]"
            elif isinstance(val, (float, np.floating, int, np.integer)) and not isinstance(val, bool):
                val = fmt(val)
            fh.write(f"{key}={val}\n")
        fh.write(f"STATUS={status}\n")


# ---------------------------------------------------------------- commands

def _initial_states(cfg, seed):
    s = cfg.spec
    N = int(cfg.solver["N"])
    return sample_initial_states(s.dist, N, seed)


def _limit_solution(cfg, override):
    s, p = cfg.spec, cfg.solver
    assert_horizon(s, override=override)
    lc = solve_limit_coeffs(s, p["dt"])
    sol = solve_continuum(s, lc, P0=p["P0"], g0=p["g0"], s_in=p["s_in"], delta=p["delta"],
                          max_outer=p["max_outer"], kappa=p["kappa"], path_bound=p["path_bound"],
                          per_axis=p["per_axis"])
    return lc, sol


def cmd_escape(cfg, out, seed, override):
    p = cfg.spec
    r = escape_time(p, scan_dt=cfg.solver["scan_dt"], t_max=cfg.solver["t_max"])
    if r.scan is not None:
        emit_plotdata(Table(["t", "delta"], list(zip(r.scan.t, r.scan.delta))),
                      os.path.join(out, "escape.csv"))
    items = [("escape_time", r.escape_time), ("T", r.T), ("margin", r.margin),
             ("horizon_ok", r.horizon_ok), ("method", r.method), ("touching", r.touching)]
    if r.equilibrium is not None:
        items.append(("equilibrium", r.equilibrium))
    _write_summary(out, items)
    print(f"escape_time={fmt(r.escape_time)} horizon_ok={r.horizon_ok} margin={fmt(r.margin)}")


def cmd_solve_finite(cfg, out, seed, override):
    s, p = cfg.spec, cfg.solver
    X0 = _initial_states(cfg, seed)
    sol = solve_finite(s, X0, dt=p["dt"], cap=int(p["cap"]), override_horizon=override)
    emit_plotdata(Table(_vec("P", s.D) + ["J_N"], [list(P) + [J] for P, J in sol.cost_table]),
                  os.path.join(out, "cost_table.csv"))
    emit_plotdata(Table(["agent"] + _vec("x0", s.n) + ["destination"],
                        [[i] + list(X0[i]) + [int(sol.lam[i])] for i in range(X0.shape[0])]),
                  os.path.join(out, "assignment.csv"))
    _write_summary(out, [("N", X0.shape[0]), ("seed", seed), ("P_opt", np.asarray(sol.P_opt)),
                         ("J_opt", sol.J_opt)])
    print(f"P_opt={np.asarray(sol.P_opt).tolist()} J_opt={fmt(sol.J_opt)}")


def cmd_solve_continuum(cfg, out, seed, override):
    s = cfg.spec
    lc, sol = _limit_solution(cfg, override)
    emit_plotdata(Table(["iter"] + _vec("P", s.D) + ["J"],
                        [[k] + list(P) + [J] for k, (P, J) in enumerate(sol.iterates)]),
                  os.path.join(out, "iterates.csv"))
    emit_plotdata(Table(["destination", "g"], [[j, g] for j, g in enumerate(sol.g_star.g)]),
                  os.path.join(out, "weights.csv"))
    _write_summary(out, [("P_star", np.asarray(sol.P_star)), ("J_star", sol.J_star),
                         ("iterations", len(sol.iterates) - 1)])
    print(f"P_star={np.asarray(sol.P_star).tolist()} J_star={fmt(sol.J_star)}")


def cmd_simulate(cfg, out, seed, override):
    s, p = cfg.spec, cfg.solver
    X0 = _initial_states(cfg, seed)
    if p["strategy"] == "finite":
        sol = solve_finite(s, X0, dt=p["dt"], cap=int(p["cap"]), override_horizon=override)
        strategy = Finite(sol, sol.coeffs)
    elif p["strategy"] == "continuum":
        lc, sol = _limit_solution(cfg, override)
        strategy = Continuum(sol, lc)
    else:
        raise ConfigError(f"solver.strategy must be 'finite' or 'continuum', got {p['strategy']!r}")
    b = simulate(s, X0, strategy, p["dt_fwd"])
    N, K = b.states.shape[:2]
    stride = max(1, int(p["output_stride"]))
    nodes = sorted(set(range(0, K, stride)) | {K - 1})
    rows = [[b.times[k], i] + list(b.states[i, k]) + list(b.controls[i, k])
            for i in range(N) for k in nodes]
    emit_plotdata(Table(["t", "agent"] + _vec("x", s.n) + _vec("u", s.m), rows),
                  os.path.join(out, "trajectories.csv"))
    emit_plotdata(Table(["t"] + _vec("xbar", s.n),
                        [[b.times[k]] + list(b.mean_path[k]) for k in range(K)]),
                  os.path.join(out, "means.csv"))
    _write_summary(out, [("strategy", p["strategy"]), ("N", N), ("seed", seed),
                         ("realized_cost", b.realized_cost)])
    print(f"realized_cost={fmt(b.realized_cost)}")


def cmd_compare(cfg, out, seed, override):
    s, p = cfg.spec, cfg.solver
    assert_horizon(s, override=override)
    lc = solve_limit_coeffs(s, p["dt"])
    seeds = [seed + int(k) for k in p["seeds"]]
    table = comparison_experiment(s, [int(N) for N in p["N_list"]], seeds,
                                  P_grid_step=p["P_grid_step"], lc=lc, s_in=p["s_in"],
                                  delta=p["delta"], optima=False)
    D = s.D
    emit_plotdata(Table(["N", "seed"] + _vec("P", D) + _vec("F_N", D) + ["J", "J_N", "J_tilde"],
                        [[r["N"], r["seed"]] + list(r["P"]) + list(r["F"])
                         + [r["J"], r["J_N"], r["J_tilde"]] for r in table.rows]),
                  os.path.join(out, "compare.csv"))
    summary = table.summary()
    for N in sorted({r["N"] for r in summary}):
        rows = [[r["P"][0], r["J"], r["J_N_mean"], r["J_N_std"], r["J_tilde_mean"],
                 r["J_tilde_std"], r["F_N_mean"][0]] for r in summary if r["N"] == N]
        emit_plotdata(Table(["P_1", "J", "J_N_mean", "J_N_std", "J_tilde_mean", "J_tilde_std",
                             "F_N_mean"], rows), os.path.join(out, f"compare_summary_N{N}.csv"))
    _write_summary(out, [("N_list", p["N_list"]), ("seeds", len(seeds)),
                         ("rows", len(table.rows))])
    print(f"rows={len(table.rows)}")


HANDLERS = {
    "escape": cmd_escape,
    "solve-finite": cmd_solve_finite,
    "solve-continuum": cmd_solve_continuum,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
}


def run(command, cfg: RunConfig, out, seed=0, override_horizon=False):
    """Execute one command; returns the process exit status."""
    os.makedirs(out, exist_ok=True)
    HANDLERS[command](cfg, out, seed, override_horizon)
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="cct", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="JSON configuration file")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--seed", type=int, default=0, help="seed for every random draw")
    ap.add_argument("--override-horizon", action="store_true",
                    help="run even if the horizon is not certified below the escape time")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
        return run(args.command, cfg, args.out, args.seed, args.override_horizon)
    except (CCTError, OSError, ValueError) as exc:
        name = type(exc).__name__
        print(f"error: {name}: {exc}", file=sys.stderr)
        try:
            os.makedirs(args.out, exist_ok=True)
            _write_summary(args.out, [("error", name), ("message", str(exc).replace("\n", " "))],
                           status="FAILED")
        except OSError:
            pass
        return 1


if __name__ == "__main__":
    sys.exit(main())
