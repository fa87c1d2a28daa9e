"""Deterministic, stochastic-in-expectation and worst-case co-design formulations.

Every formulation is solved by nested coordination: a bounded scalar
search over the mean stiffness ``mu_k`` wraps inner transcribed
optimal-control solves. Inner solves are grouped in fixed-size chunks,
each starting from a cold solver, so an evaluation is a pure function
of ``mu_k`` whatever the thread count.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Literal, Sequence

import numpy as np
from scipy.linalg import expm
from scipy.optimize import minimize_scalar

from .gpc import build_basis, family_for, gpc_moments, gpc_project, scale_nodes
from .mcs import draw_samples, pointwise_band
from .problem import ConfigError, PolytopeVertex, SasaConfig, polytope_vertices
from .transcription import (
    OcpSolution,
    ProgramSolver,
    _switch_time,
    assemble_ocp,
    NumericalFailure,
    solution_from_result,
    soften_inequalities,
    stack_programs,
)

CHUNK = 256
#: stand-in for +inf handed to the scalar search (it cannot compare infinities)
INFEASIBLE_PENALTY = 1e6
#: relative objective tolerance within which WCR vertices count as tied
VERTEX_TIE_RTOL = 1e-4
#: pairwise max deviation for vertex trajectories to share a group
GROUP_TOL = 1e-6
#: price of a unit violation of a relaxed MSC stationarity row
MSC_SLACK_WEIGHT = 1e4


class FormulationError(RuntimeError):
    """The formulation has no feasible design in the searched bounds."""


# ---------------------------------------------------------------------------
# parallel map


def parallel_map(fn: Callable[[Any], Any], items: Sequence[Any], threads: int = 1) -> list[Any]:
    """Ordered map; ``threads`` only changes the schedule, never the result."""
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# outer search


@dataclass(frozen=True)
class OuterSearchSettings:
    bounds: tuple[float, float]
    tol: float = 1e-6
    max_iter: int = 200
    method: str = "bounded-brent"

    def __post_init__(self) -> None:
        if not self.tol > 0:
            raise ConfigError("outer tolerance must be > 0")
        lo, hi = self.bounds
        if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
            raise ConfigError(f"outer bounds {self.bounds} must be finite and ordered")

    @classmethod
    def from_config(cls, config: SasaConfig) -> OuterSearchSettings:
        return cls(tuple(config.k_bounds), config.solver_tol, config.outer_max_iter)


@dataclass
class OuterResult:
    mu_k: float
    objective: float
    trace: list[tuple[float, float]]
    accepted: list[bool]
    converged: bool
    message: str = ""

    @property
    def n_evaluations(self) -> int:
        return len(self.trace)


def outer_minimize(evaluate: Callable[[float], float], settings: OuterSearchSettings) -> OuterResult:
    """Bounded golden-section/parabolic search on ``mu_k``.

    Every evaluation is recorded; an evaluation is *accepted* when it
    improves on the best value seen so far. Non-finite values are passed
    to the search as a large finite penalty so it steers away from them.
    """
    trace: list[tuple[float, float]] = []
    accepted: list[bool] = []
    best = [math.inf]

    def f(mu: float) -> float:
        val = float(evaluate(float(mu)))
        trace.append((float(mu), val))
        ok = math.isfinite(val) and val < best[0]
        accepted.append(ok)
        if ok:
            best[0] = val
        return val if math.isfinite(val) else INFEASIBLE_PENALTY

    lo, hi = settings.bounds
    if hi - lo <= settings.tol:
        mu = 0.5 * (lo + hi)
        val = f(mu)
        return OuterResult(mu, trace[-1][1], trace, accepted, True, "degenerate bounds")
    res = minimize_scalar(
        f, bounds=(lo, hi), method="bounded",
        options={"xatol": settings.tol, "maxiter": settings.max_iter},
    )
    # report the best evaluated point (the search's own incumbent)
    i = int(np.argmin([v if math.isfinite(v) else math.inf for _, v in trace]))
    mu, val = trace[i]
    converged = bool(res.success)
    msg = "converged" if converged else f"stopped: {res.message}"
    return OuterResult(mu, val, trace, accepted, converged, msg)


# ---------------------------------------------------------------------------
# batched inner solves


@dataclass
class TrajectoryBundle:
    """Per-realization optimal trajectories (rows) on the transcription grid."""

    times: np.ndarray
    u: np.ndarray
    xi1: np.ndarray
    xi2: np.ndarray
    objective: np.ndarray  # xi1(tf) per realization (positive)
    switch_times: np.ndarray  # nan where no switch

    def quantity(self, name: str) -> np.ndarray:
        return {"u": self.u, "xi1": self.xi1, "xi2": self.xi2}[name]


def solve_plants(
    config: SasaConfig,
    k: np.ndarray,
    J: np.ndarray,
    xi2_0: np.ndarray,
    stationarity_k: np.ndarray,
    *,
    keep: bool = False,
    threads: int = 1,
) -> tuple[np.ndarray, TrajectoryBundle | None]:
    """OLMC inner solves: one program per plant; returns ``xi1(tf)`` (nan if infeasible)."""
    n = len(k)
    chunks = [range(i, min(i + CHUNK, n)) for i in range(0, n, CHUNK)]

    def run(idx: range) -> list[tuple[float, OcpSolution | None]]:
        solver = ProgramSolver(warm_start=True)
        out = []
        for j in idx:
            prog = assemble_ocp(config, float(k[j]), float(J[j]), float(xi2_0[j]),
                                stationarity_k=float(stationarity_k[j]))
            res = solver.solve(prog)
            if res.status in ("infeasible", "unbounded"):
                out.append((math.nan, None))
                continue
            sol = solution_from_result(prog, res) if keep else None
            out.append((-res.objective, sol))
        return out

    results = [r for chunk in parallel_map(run, chunks, threads) for r in chunk]
    obj = np.array([r[0] for r in results])
    if not keep:
        return obj, None
    times = assemble_times(config)
    nan_row = np.full(times.size, np.nan)
    rows = [r[1] for r in results]
    u = np.array([s.u if s is not None else nan_row for s in rows])
    xi1 = np.array([s.xi1 if s is not None else nan_row for s in rows])
    xi2 = np.array([s.xi2 if s is not None else nan_row for s in rows])
    sw = np.array([
        _switch_time(times, uu, config.u_min, config.u_max) if s is not None else None for uu, s in zip(u, rows)
    ], dtype=float)
    return obj, TrajectoryBundle(times, u, xi1, xi2, obj, sw)


def assemble_times(config: SasaConfig) -> np.ndarray:
    return np.linspace(config.t0, config.tf, config.n_t)


# ---------------------------------------------------------------------------
# reports


@dataclass
class FormulationReport:
    tag: str
    objective: float
    mu_k_star: float
    switch_time: float | None
    wall_time: float
    status: str = "optimal"
    worst_vertex: dict[str, Any] | None = None
    trace: list[tuple[float, float]] = field(default_factory=list)
    converged: bool = True
    extras: dict[str, Any] = field(default_factory=dict)
    bundle: TrajectoryBundle | None = None
    bands: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    vertex_solutions: list[tuple[PolytopeVertex, OcpSolution]] = field(default_factory=list)
    msc_log: dict[str, np.ndarray] = field(default_factory=dict)

    def summary(self) -> dict[str, Any]:
        """JSON-ready scalars; timing lives under ``timing`` so it can be ignored when diffing."""
        return {
            "formulation": self.tag,
            "status": self.status,
            "objective": self.objective,
            "mu_k_star": self.mu_k_star,
            "switch_time": self.switch_time,
            "worst_vertex": self.worst_vertex,
            "converged": self.converged,
            "n_evaluations": len(self.trace),
            "trace": [[m, v if math.isfinite(v) else None] for m, v in self.trace],
            **self.extras,
            "timing": {"wall_time_s": self.wall_time},
        }


def _finish(tag: str, outer: OuterResult, t0: float, **kw: Any) -> FormulationReport:
    if not math.isfinite(outer.objective):
        raise FormulationError(f"{tag}: no feasible design found in the searched bounds")
    return FormulationReport(
        tag=tag, objective=-outer.objective, mu_k_star=outer.mu_k, wall_time=time.perf_counter() - t0,
        status="optimal" if outer.converged else "max-iterations", trace=outer.trace,
        converged=outer.converged, **kw,
    )


# ---------------------------------------------------------------------------
# deterministic


def solve_deterministic_ccd(config: SasaConfig, settings: OuterSearchSettings | None = None) -> FormulationReport:
    """Nominal plant: maximize ``xi1(tf)`` over ``mu_k`` with stationarity at ``mu_k``."""
    t0 = time.perf_counter()
    settings = settings or OuterSearchSettings.from_config(config)

    def single(mu: float, keep: bool = False):
        a = np.array([mu])
        return solve_plants(config, a, np.array([config.mu_J]), np.array([config.mu_xi2_0]), a, keep=keep)

    def evaluate(mu: float) -> float:
        v = single(mu)[0][0]
        return -v if math.isfinite(v) else math.inf

    outer = outer_minimize(evaluate, settings)
    _, bundle = single(outer.mu_k, keep=True)
    sw = bundle.switch_times[0]
    return _finish("DET", outer, t0, switch_time=None if math.isnan(sw) else float(sw), bundle=bundle)


# ---------------------------------------------------------------------------
# stochastic in expectation


UpMethod = Literal["mcs", "gpc"]


def solve_se_uccd(
    config: SasaConfig,
    method: UpMethod = "gpc",
    *,
    N: int | None = None,
    seed: int | None = None,
    threads: int = 1,
    settings: OuterSearchSettings | None = None,
) -> FormulationReport:
    """OLMC expected-value design; realizations are MCS samples or gPC nodes."""
    t0 = time.perf_counter()
    settings = settings or OuterSearchSettings.from_config(config)
    qs = config.quantities("gaussian")
    extras: dict[str, Any] = {"up_method": method}
    if method == "mcs":
        N = config.n_mcs if N is None else N
        seed = config.seed if seed is None else seed
        samples = draw_samples(qs, N, seed, "stochastic")
        dk, J, x20 = samples.plants(0.0)
        weights = None
        basis = None
        extras.update(n_samples=N, seed=seed, rng=samples.rng)
    elif method == "gpc":
        basis = build_basis([family_for(q.kind) for q in qs], config.gpc_nodes, "full_tensor", config.gpc_order)
        dk, J, x20 = (scale_nodes(basis.nodes[:, d], q) for d, q in enumerate(qs))
        weights = basis.weights
        extras.update(n_nodes=basis.Q, n_basis=basis.M, order=config.gpc_order)
    else:
        raise ConfigError(f"unknown propagation method {method!r}")

    def expectation(values: np.ndarray) -> float:
        if basis is None:
            return float(np.mean(values))
        return float(gpc_moments(gpc_project(values, basis))[0])

    def run(mu: float, keep: bool = False):
        mu_arr = np.full(dk.size, mu)
        return solve_plants(config, mu + dk, J, x20, mu_arr, keep=keep, threads=threads)

    def evaluate(mu: float) -> float:
        obj, _ = run(mu)
        if not np.all(np.isfinite(obj)):
            return math.inf
        return -expectation(obj)

    outer = outer_minimize(evaluate, settings)
    obj, bundle = run(outer.mu_k, keep=True)
    has = np.isfinite(bundle.switch_times)
    if weights is None:
        sw = float(np.mean(bundle.switch_times[has])) if has.any() else None
        bands = {}
        for name in ("u", "xi1", "xi2"):
            b = pointwise_band(bundle.quantity(name))
            bands[name] = {"mean": b.mean, "std": b.std, "p10": b.p10, "p50": b.p50, "p90": b.p90, "p100": b.p100}
        var = float(np.var(obj, ddof=1)) if obj.size > 1 else 0.0
    else:
        w = weights[has]
        sw = float(np.sum(w * bundle.switch_times[has]) / np.sum(w)) if has.any() else None
        bands = {}
        for name in ("u", "xi1", "xi2"):
            m, v = gpc_moments(gpc_project(bundle.quantity(name), basis))
            bands[name] = {"mean": m, "std": np.sqrt(np.maximum(v, 0.0))}
        var = float(gpc_moments(gpc_project(obj, basis))[1])
    extras.update(objective_variance=var, n_without_switch=int((~has).sum()))
    tag = f"OLMC-SE-{method.upper()}"
    return _finish(tag, outer, t0, switch_time=sw, extras=extras, bundle=bundle, bands=bands)


# ---------------------------------------------------------------------------
# worst-case robust, vertex enumeration


def _vertex_arrays(vertices: Sequence[PolytopeVertex]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (np.array([v.k for v in vertices]), np.array([v.J for v in vertices]),
            np.array([v.xi2_0 for v in vertices]))


def adverse_signs(vertices: Sequence[PolytopeVertex], values: np.ndarray) -> tuple[int, ...]:
    """Per quantity, the side (-1/+1) whose vertices have the lower mean objective."""
    out = []
    for d in range(len(vertices[0].names)):
        s = np.array([v.signs[d] for v in vertices])
        if not (s != 0).any():
            out.append(0)
            continue
        lo, hi = values[s < 0].mean(), values[s > 0].mean()
        out.append(-1 if lo < hi else 1)
    return tuple(out)


def select_worst_vertex(vertices: Sequence[PolytopeVertex], values: np.ndarray, rtol: float = VERTEX_TIE_RTOL) -> int:
    """Index of the vertex with the poorest objective.

    Several vertices can bind at once at a robust optimum. Vertices within
    ``rtol`` of the minimum are tied; among them the one agreeing with
    the most adverse directions wins, then the lowest objective, then
    enumeration order.
    """
    vmin = float(np.min(values))
    tied = [i for i, v in enumerate(values) if v <= vmin + rtol * max(abs(vmin), 1e-12)]
    adverse = adverse_signs(vertices, values)

    def key(i: int) -> tuple[int, float, int]:
        agree = sum(1 for s, a in zip(vertices[i].signs, adverse) if s == a and s != 0)
        return (-agree, float(values[i]), i)

    return min(tied, key=key)


def trajectory_groups(solutions: Sequence[OcpSolution], tol: float = GROUP_TOL) -> list[list[int]]:
    """Group solutions whose state trajectories agree within ``tol`` (max norm)."""
    groups: list[list[int]] = []
    for i, s in enumerate(solutions):
        for g in groups:
            r = solutions[g[0]]
            dev = max(np.max(np.abs(s.xi1 - r.xi1)), np.max(np.abs(s.xi2 - r.xi2)))
            if dev <= tol:
                g.append(i)
                break
        else:
            groups.append([i])
    return groups


def solve_wcr_olmc(
    config: SasaConfig, *, threads: int = 1, settings: OuterSearchSettings | None = None
) -> FormulationReport:
    """Maximize the worst vertex ``xi1(tf)``; stationarity uses each vertex stiffness."""
    t0 = time.perf_counter()
    settings = settings or OuterSearchSettings.from_config(config)
    qs = config.quantities("crisp-uniform")

    def run(mu: float, keep: bool = False):
        verts = polytope_vertices(qs, mu)
        k, J, x20 = _vertex_arrays(verts)
        obj, bundle = solve_plants(config, k, J, x20, k, keep=keep, threads=threads)
        return verts, obj, bundle

    def evaluate(mu: float) -> float:
        _, obj, _ = run(mu)
        return -float(np.min(obj)) if np.all(np.isfinite(obj)) else math.inf

    outer = outer_minimize(evaluate, settings)
    verts, obj, bundle = run(outer.mu_k, keep=True)
    sols = [
        OcpSolution(bundle.times, bundle.xi1[i], bundle.xi2[i], bundle.u[i], -obj[i], "optimal",
                    None if math.isnan(bundle.switch_times[i]) else float(bundle.switch_times[i]))
        for i in range(len(verts))
    ]
    w = select_worst_vertex(verts, obj)
    groups = trajectory_groups(sols)
    worst = {
        "index": w,
        "label": verts[w].label(),
        "signs": dict(zip(verts[w].names, verts[w].signs)),
        "k": verts[w].k, "J": verts[w].J, "xi2_0": verts[w].xi2_0,
        "objective": float(obj[w]),
    }
    extras = {
        "vertex_stiffness": verts[w].k,
        "vertex_objectives": {v.label(): float(o) for v, o in zip(verts, obj)},
        "adverse_signs": dict(zip(verts[0].names, adverse_signs(verts, obj))),
        "n_trajectory_groups": len(groups),
        "trajectory_groups": groups,
    }
    return _finish("OLMC-WCR", outer, t0, switch_time=sols[w].switch_time, worst_vertex=worst,
                   extras=extras, bundle=bundle, vertex_solutions=list(zip(verts, sols)))


# ---------------------------------------------------------------------------
# multi-stage control, receding horizon


def zoh_step(k: float, J: float, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact discretization ``x+ = Ad x + Bd u`` for a constant control over ``h``."""
    M = np.zeros((3, 3))
    M[0, 1] = 1.0
    M[1, 0] = -k / J
    M[1, 2] = 1.0 / J
    E = expm(M * h)
    return E[:2, :2], E[:2, 2]


def _mpc_run(
    config: SasaConfig, mu_k: float, verts: Sequence[PolytopeVertex], truth: int, times: np.ndarray
) -> tuple[np.ndarray, np.ndarray, int, list[int]]:
    """Receding-horizon loop on truth plant ``truth``.

    Returns states, controls, the failing step (-1 if none) and the steps
    whose subproblem needed the stationarity relaxation.
    """
    n = times.size
    Ad, Bd = zoh_step(verts[truth].k, verts[truth].J, times[1] - times[0])
    X = np.full((n, 2), np.nan)
    X[0] = (0.0, verts[truth].xi2_0)
    U = np.full(n, np.nan)
    r = config.robust_horizon_steps
    solver = ProgramSolver()
    relaxed: list[int] = []
    for i in range(n - 1):
        nn = n - i
        x0 = (float(X[i, 0]), float(X[i, 1]))
        progs = [
            assemble_ocp(config, v.k, v.J, v.xi2_0, terminal_velocity_eq=False, stationarity_k=mu_k,
                         terminal_penalty_weight=config.msc_penalty_weight, t_start=float(times[i]),
                         x_start=x0, n_nodes=nn)
            for v in verts
        ]
        stacked = stack_programs(progs, shared=range(min(r, nn - 1)))
        res = _try_solve(solver, stacked)
        if res is None and config.msc_soft_stationarity:
            relaxed.append(i)
            res = _try_solve(solver, soften_inequalities(stacked, MSC_SLACK_WEIGHT))
        if res is None:
            return X, U, i, relaxed
        U[i] = float(res.x[stacked.layout["s0/u"][0]])
        X[i + 1] = Ad @ X[i] + Bd * U[i]
    U[-1] = U[-2]
    return X, U, -1, relaxed


def _try_solve(solver: ProgramSolver, prog) -> Any:
    try:
        res = solver.solve(prog)
    except NumericalFailure:
        return None
    return res if res.status in ("optimal", "tolerance-not-met") else None


def receding_horizon(
    config: SasaConfig, mu_k: float, *, keep: bool = False, threads: int = 1
) -> tuple[np.ndarray | None, dict[str, Any]]:
    """Multi-stage receding-horizon control of every vertex plant.

    Each truth plant (a polytope vertex) is driven by its own loop: at
    every grid step the stacked scenario program over ``[t_i, tf]`` is
    started from that plant's measured state, its shared first control is
    applied through an exact zero-order-hold step, and the loop moves on.
    Returns the realized ``xi1(tf)`` per plant (``None`` if a subproblem
    failed) and, with ``keep``, the realized trajectories.
    """
    verts = polytope_vertices(config.quantities("crisp-uniform"), mu_k)
    times = assemble_times(config)
    runs = parallel_map(lambda p: _mpc_run(config, mu_k, verts, p, times), range(len(verts)), threads)
    failed = [(p, fs) for p, (_, _, fs, _) in enumerate(runs) if fs >= 0]
    log: dict[str, Any] = {}
    if keep:
        log = {
            "times": times,
            "u": np.array([r[1] for r in runs]),
            "xi1": np.array([r[0][:, 0] for r in runs]),
            "xi2": np.array([r[0][:, 1] for r in runs]),
            "failed": failed,
            "relaxed_steps": [r[3] for r in runs],
            "vertices": verts,
        }
    if failed:
        return None, log
    return np.array([r[0][-1, 0] for r in runs]), log


def msc_aggregate(values: np.ndarray, how: str) -> float:
    if how == "mean":
        return float(np.mean(values))
    if how == "worst":
        return float(np.min(values))
    raise ConfigError(f"unknown MSC aggregate {how!r}")


def solve_msc_wcr(
    config: SasaConfig, *, threads: int = 1, settings: OuterSearchSettings | None = None
) -> FormulationReport:
    """MSC design scored on the realized vertex plants (mean or worst, per config)."""
    t0 = time.perf_counter()
    settings = settings or OuterSearchSettings.from_config(config)
    how = config.msc_aggregate

    def evaluate(mu: float) -> float:
        v, _ = receding_horizon(config, mu, threads=threads)
        return -msc_aggregate(v, how) if v is not None else math.inf

    outer = outer_minimize(evaluate, settings)
    final, log = receding_horizon(config, outer.mu_k, keep=True, threads=threads)
    verts = log["vertices"]
    w = int(np.argmin(final))
    extras = {
        "aggregate": how,
        "penalty_weight": config.msc_penalty_weight,
        "robust_horizon_steps": config.robust_horizon_steps,
        "worst_realized": float(final[w]),
        "mean_realized": float(np.mean(final)),
        "realized_xi1_tf": {v.label(): float(x) for v, x in zip(verts, final)},
        "realized_xi2_tf": {v.label(): float(x) for v, x in zip(verts, log["xi2"][:, -1])},
        "relaxed_steps": {v.label(): r for v, r in zip(verts, log["relaxed_steps"])},
    }
    sw = _switch_time(log["times"], log["u"][w], config.u_min, config.u_max)
    return _finish("MSC-WCR", outer, t0, switch_time=sw,
                   worst_vertex={"index": w, "label": verts[w].label()}, extras=extras, msc_log=log)


# ---------------------------------------------------------------------------
# sensitivity sweeps


SweepParam = Literal["s_f", "k_s"]


def sweep_config(config: SasaConfig, param: SweepParam, value: float) -> SasaConfig:
    """Config for one sweep point; the lower stiffness bound is lifted to the shifted bound."""
    if value < 0:
        raise ConfigError(f"sweep values must be >= 0, got {value}")
    if param == "s_f":
        s_f, k_s = float(value), config.k_s
    elif param == "k_s":
        s_f, k_s = 1.0, float(value)
    else:
        raise ConfigError(f"unknown sweep parameter {param!r}")
    lo, hi = config.k_bounds
    lo = max(lo, k_s * s_f * config.sigma.sigma_k)
    if lo > hi:
        raise ConfigError(f"shifted stiffness bound {lo} exceeds the upper bound {hi}")
    if config.mu_J - k_s * s_f * config.sigma.sigma_J <= 0:
        raise ConfigError(f"{param}={value} puts an inertia-ratio vertex at or below zero")
    return config.replace(s_f=s_f, k_s=k_s, k_bounds=(lo, hi))


def sweep(config: SasaConfig, param: SweepParam, grid: Sequence[float], *, threads: int = 1) -> list[dict[str, Any]]:
    """WCR design per grid value; failures are recorded and the sweep continues."""
    if len(grid) == 0:
        raise ConfigError("sweep grid is empty")
    if param not in ("s_f", "k_s"):
        raise ConfigError(f"unknown sweep parameter {param!r}")
    rows = []
    for value in grid:
        row: dict[str, Any] = {param: float(value)}
        try:
            rep = solve_wcr_olmc(sweep_config(config, param, value), threads=threads)
            row.update(objective=rep.objective, mu_k_star=rep.mu_k_star,
                       vertex_stiffness=rep.extras["vertex_stiffness"], status=rep.status)
        except (ValueError, FormulationError) as exc:
            row.update(objective=None, mu_k_star=None, vertex_stiffness=None, status=f"failed: {exc}")
        rows.append(row)
    return rows
