"""Trapezoidal direct transcription of the SASA optimal control problem.

The decision vector stacks ``[u; xi1; xi2]`` at the grid nodes. The
program is a sparse LP, or a QP when the terminal velocity is penalised
instead of constrained. LPs go to the HiGHS dual simplex (vertex
solutions, warm starts); QPs go to the Clarabel interior-point solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import clarabel
import highspy
import numpy as np
import scipy.sparse as sp

from .problem import SasaConfig

Status = Literal["optimal", "infeasible", "unbounded", "tolerance-not-met"]

#: primal/dual tolerance required of an "optimal" inner solution
KKT_TOL = 1e-8


class DimensionError(ValueError):
    pass


class InvalidOptionError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class LinearQuadraticProgram:
    """minimize ``0.5 x'Hx + f'x`` s.t. ``A x <= b``, ``Aeq x = beq``, ``lb <= x <= ub``.

    ``layout`` maps a block name (``"u"``, ``"xi1"``, ``"xi2"``, or
    ``"s3/u"`` for stacked scenario programs) to its column indices.
    """

    H: sp.csc_matrix
    f: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    Aeq: sp.csr_matrix
    beq: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    layout: dict[str, np.ndarray]
    times: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_vars(self) -> int:
        return self.f.size

    @property
    def is_quadratic(self) -> bool:
        return self.H.nnz > 0


@dataclass
class OcpSolution:
    times: np.ndarray
    xi1: np.ndarray
    xi2: np.ndarray
    u: np.ndarray
    objective: float
    status: Status
    switch_time: float | None = None
    defect_residual: float = np.nan
    kkt_residual: float = np.nan

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


@dataclass
class ProgramResult:
    x: np.ndarray
    objective: float
    status: Status
    primal_residual: float
    kkt_residual: float


# ---------------------------------------------------------------------------
# assembly


def assemble_ocp(
    config: SasaConfig,
    k: float,
    J: float,
    xi2_0: float,
    *,
    terminal_velocity_eq: bool = True,
    stationarity_k: float | None = None,
    terminal_penalty_weight: float | None = None,
    t_start: float | None = None,
    x_start: tuple[float, float] | None = None,
    n_nodes: int | None = None,
) -> LinearQuadraticProgram:
    """Build the transcribed program for one plant ``(k, J, xi2_0)``.

    The objective is ``-xi1(tf)``. ``stationarity_k`` adds the holding
    constraint ``stationarity_k * xi1(tf) <= u_max``. A terminal penalty
    weight ``w`` adds ``w * xi2(tf)**2`` in place of the hard terminal
    velocity equality. ``t_start``/``n_nodes`` select a shorter horizon
    ``[t_start, tf]`` (used by receding-horizon subproblems) and
    ``x_start`` overrides the initial state ``(0, xi2_0)``.
    """
    n = config.n_t if n_nodes is None else int(n_nodes)
    if n < 2:
        raise DimensionError(f"need at least 2 grid nodes, got {n}")
    if J <= 0:
        raise ValueError(f"inertia ratio must be positive, got J={J}")
    if terminal_velocity_eq and terminal_penalty_weight is not None:
        raise InvalidOptionError("terminal equality and terminal penalty are mutually exclusive")
    t0 = config.t0 if t_start is None else float(t_start)
    if not t0 < config.tf:
        raise DimensionError(f"t_start={t0} must be < tf={config.tf}")

    times = np.linspace(t0, config.tf, n)
    h = (config.tf - t0) / (n - 1)
    iu, i1, i2 = np.arange(n), n + np.arange(n), 2 * n + np.arange(n)
    m = n - 1
    seg = np.arange(m)
    r1, r2 = 2 * seg, 2 * seg + 1
    ones = np.ones(m)
    a = 0.5 * h * k / J
    g = 0.5 * h / J
    # xi1 defects: xi1[i+1] - xi1[i] - h/2 (xi2[i] + xi2[i+1])
    # xi2 defects: xi2[i+1] - xi2[i] - h/2 ((u - k xi1)/J at i and i+1)
    rows = [r1, r1, r1, r1, r2, r2, r2, r2, r2, r2]
    cols = [i1[1:], i1[:-1], i2[:-1], i2[1:], i2[1:], i2[:-1], i1[:-1], i1[1:], iu[:-1], iu[1:]]
    vals = [ones, -ones, -0.5 * h * ones, -0.5 * h * ones, ones, -ones, a * ones, a * ones, -g * ones, -g * ones]
    n_def = 2 * m
    x0 = (0.0, float(xi2_0)) if x_start is None else (float(x_start[0]), float(x_start[1]))
    extra_rows = [i1[0], i2[0]]
    beq_extra = [x0[0], x0[1]]
    if terminal_velocity_eq:
        extra_rows.append(i2[-1])
        beq_extra.append(0.0)
    for j, c in enumerate(extra_rows):
        rows.append(np.array([n_def + j]))
        cols.append(np.array([c]))
        vals.append(np.array([1.0]))
    n_eq = n_def + len(extra_rows)
    Aeq = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_eq, 3 * n)
    )
    beq = np.concatenate([np.zeros(n_def), beq_extra])

    if stationarity_k is not None:
        A = sp.csr_matrix(([float(stationarity_k)], ([0], [i1[-1]])), shape=(1, 3 * n))
        b = np.array([config.u_max])
    else:
        A = sp.csr_matrix((0, 3 * n))
        b = np.zeros(0)

    f = np.zeros(3 * n)
    f[i1[-1]] = -1.0
    if terminal_penalty_weight is not None:
        w = float(terminal_penalty_weight)
        H = sp.csc_matrix(([2.0 * w], ([i2[-1]], [i2[-1]])), shape=(3 * n, 3 * n))
    else:
        H = sp.csc_matrix((3 * n, 3 * n))

    lb = np.concatenate([np.full(n, config.u_min), np.full(2 * n, -np.inf)])
    ub = np.concatenate([np.full(n, config.u_max), np.full(2 * n, np.inf)])
    return LinearQuadraticProgram(
        H=H, f=f, A=A, b=b, Aeq=Aeq, beq=beq, lb=lb, ub=ub,
        layout={"u": iu, "xi1": i1, "xi2": i2},
        times=times,
        meta={"k": k, "J": J, "xi2_0": xi2_0, "u_min": config.u_min, "u_max": config.u_max},
    )


def stack_programs(
    programs: Sequence[LinearQuadraticProgram],
    shared: Sequence[int] = (),
    weights: Sequence[float] | None = None,
) -> LinearQuadraticProgram:
    """Combine scenario programs into one block program.

    Columns listed in ``shared`` (local indices, identical in every
    program) are merged into a single variable owned by the first
    scenario, so the scenarios cannot act differently on them. The
    objective is the weighted sum of scenario objectives (default: mean).
    """
    S = len(programs)
    if S == 0:
        raise DimensionError("no programs to stack")
    nv = programs[0].n_vars
    if any(p.n_vars != nv for p in programs):
        raise DimensionError("scenario programs must share one layout")
    w = np.full(S, 1.0 / S) if weights is None else np.asarray(weights, dtype=float)
    shared = np.asarray(sorted(set(int(i) for i in shared)), dtype=int)
    # column map: local index j of scenario s -> global column
    keep = np.setdiff1d(np.arange(nv), shared)
    col_map = np.empty((S, nv), dtype=int)
    col_map[0] = np.arange(nv)
    nxt = nv
    for s in range(1, S):
        col_map[s, shared] = shared
        col_map[s, keep] = nxt + np.arange(keep.size)
        nxt += keep.size
    N = nxt

    def remap(M: sp.spmatrix, s: int) -> sp.coo_matrix:
        M = M.tocoo()
        return M.row, col_map[s, M.col], M.data

    def block(mats: list[sp.spmatrix]) -> sp.csr_matrix:
        rows, cols, vals, off = [], [], [], 0
        for s, M in enumerate(mats):
            r, c, v = remap(M, s)
            rows.append(r + off)
            cols.append(c)
            vals.append(v)
            off += M.shape[0]
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(off, N))

    f = np.zeros(N)
    Hr, Hc, Hv = [], [], []
    lb = np.full(N, -np.inf)
    ub = np.full(N, np.inf)
    layout: dict[str, np.ndarray] = {}
    for s, p in enumerate(programs):
        np.add.at(f, col_map[s], w[s] * p.f)
        r, c, v = p.H.tocoo().row, p.H.tocoo().col, p.H.tocoo().data
        Hr.append(col_map[s, r])
        Hc.append(col_map[s, c])
        Hv.append(w[s] * v)
        lb[col_map[s]] = np.maximum(lb[col_map[s]], p.lb)
        ub[col_map[s]] = np.minimum(ub[col_map[s]], p.ub)
        for name, idx in p.layout.items():
            layout[f"s{s}/{name}"] = col_map[s, idx]
    H = sp.csc_matrix((np.concatenate(Hv), (np.concatenate(Hr), np.concatenate(Hc))), shape=(N, N))
    return LinearQuadraticProgram(
        H=H, f=f,
        A=block([p.A for p in programs]), b=np.concatenate([p.b for p in programs]),
        Aeq=block([p.Aeq for p in programs]), beq=np.concatenate([p.beq for p in programs]),
        lb=lb, ub=ub, layout=layout, times=programs[0].times,
        meta={"scenarios": S, "shared": shared.tolist(), "col_map": col_map,
              **{f"s{s}": p.meta for s, p in enumerate(programs)}},
    )


def soften_inequalities(prog: LinearQuadraticProgram, weight: float) -> LinearQuadraticProgram:
    """Exact L1 relaxation: one nonnegative slack per inequality row, priced at ``weight``.

    For ``weight`` above the largest inequality multiplier the relaxed
    program has the same solutions as the original whenever that one is
    feasible; otherwise it returns the least-violating point.
    """
    m = prog.A.shape[0]
    n = prog.n_vars
    if m == 0:
        return prog
    layout = dict(prog.layout)
    layout["slack"] = np.arange(n, n + m)
    return LinearQuadraticProgram(
        H=sp.block_diag([prog.H, sp.csc_matrix((m, m))], format="csc"),
        f=np.concatenate([prog.f, np.full(m, float(weight))]),
        A=sp.hstack([prog.A, -sp.identity(m)], format="csr"), b=prog.b,
        Aeq=sp.hstack([prog.Aeq, sp.csr_matrix((prog.Aeq.shape[0], m))], format="csr"), beq=prog.beq,
        lb=np.concatenate([prog.lb, np.zeros(m)]), ub=np.concatenate([prog.ub, np.full(m, np.inf)]),
        layout=layout, times=prog.times, meta={**prog.meta, "softened": m},
    )


# ---------------------------------------------------------------------------
# solving


class ProgramSolver:
    """HiGHS wrapper that keeps the last optimal basis for warm starts.

    Warm starts only change the pivoting path, never the optimal value;
    programs of a different shape start cold.
    """

    def __init__(self, warm_start: bool = True) -> None:
        self.warm_start = warm_start
        self._highs = highspy.Highs()
        self._highs.setOptionValue("output_flag", False)
        self._highs.setOptionValue("primal_feasibility_tolerance", 1e-10)
        self._highs.setOptionValue("dual_feasibility_tolerance", 1e-10)
        self._basis = None
        self._shape: tuple[int, int] | None = None

    def reset(self) -> None:
        self._basis = None
        self._shape = None

    def _pass(self, prog: LinearQuadraticProgram, cost: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        M = sp.vstack([prog.Aeq, prog.A]).tocsc()
        lo = np.concatenate([prog.beq, np.full(prog.b.size, -np.inf)])
        hi = np.concatenate([prog.beq, prog.b])
        lp = highspy.HighsLp()
        lp.num_col_ = prog.n_vars
        lp.num_row_ = M.shape[0]
        lp.col_cost_ = prog.f if cost is None else cost
        lp.col_lower_ = prog.lb
        lp.col_upper_ = prog.ub
        lp.row_lower_ = lo
        lp.row_upper_ = hi
        lp.a_matrix_.format_ = highspy.MatrixFormat.kColwise
        lp.a_matrix_.start_ = M.indptr
        lp.a_matrix_.index_ = M.indices
        lp.a_matrix_.value_ = M.data
        lp.a_matrix_.num_col_ = prog.n_vars
        lp.a_matrix_.num_row_ = M.shape[0]
        self._highs.passModel(lp)
        return lo, hi

    def _run(self, warm: bool) -> highspy.HighsModelStatus:
        h = self._highs
        h.setOptionValue("presolve", "off" if warm else "choose")
        if warm and self._basis is not None:
            h.setBasis(self._basis)
        h.run()
        return h.getModelStatus()

    def solve(self, prog: LinearQuadraticProgram) -> ProgramResult:
        if prog.is_quadratic:
            return _solve_qp(prog)
        shape = (prog.n_vars, prog.Aeq.shape[0] + prog.A.shape[0])
        warm = self.warm_start and self._shape == shape and self._basis is not None
        self._pass(prog)
        status = self._run(warm)
        S = highspy.HighsModelStatus
        if status == S.kUnboundedOrInfeasible or (status not in (S.kOptimal, S.kInfeasible, S.kUnbounded) and warm):
            self._highs.clearSolver()
            self._basis = None
            self._highs.setOptionValue("presolve", "off")
            self._highs.run()
            status = self._highs.getModelStatus()
        if status == S.kUnboundedOrInfeasible:
            status = self._disambiguate(prog)
        n = prog.n_vars
        if status == S.kInfeasible:
            self.reset()
            return ProgramResult(np.full(n, np.nan), np.inf, "infeasible", np.inf, np.inf)
        if status == S.kUnbounded:
            self.reset()
            return ProgramResult(np.full(n, np.nan), -np.inf, "unbounded", np.nan, np.nan)
        if status != S.kOptimal:
            self.reset()
            raise NumericalFailure(f"HiGHS stopped with status {self._highs.modelStatusToString(status)}")
        sol = self._highs.getSolution()
        x = np.array(sol.col_value)
        y = np.array(sol.row_dual)
        z = np.array(sol.col_dual)
        self._basis = self._highs.getBasis()
        self._shape = shape
        primal, kkt = kkt_residuals(prog, x, y, z)
        obj = float(0.5 * x @ (prog.H @ x) + prog.f @ x)
        st: Status = "optimal" if max(primal, kkt) <= KKT_TOL else "tolerance-not-met"
        return ProgramResult(x, obj, st, primal, kkt)

    def _disambiguate(self, prog: LinearQuadraticProgram) -> highspy.HighsModelStatus:
        self._pass(prog, cost=np.zeros(prog.n_vars))
        self._highs.setOptionValue("presolve", "off")
        self._highs.run()
        S = highspy.HighsModelStatus
        return S.kInfeasible if self._highs.getModelStatus() == S.kInfeasible else S.kUnbounded


def _solve_qp(prog: LinearQuadraticProgram, tol: float = 1e-10) -> ProgramResult:
    n = prog.n_vars
    fl, fu = np.isfinite(prog.lb), np.isfinite(prog.ub)
    eye = sp.identity(n, format="csr")
    # Clarabel form: A x + s = b with s in (zero cone, nonnegative cone)
    A = sp.vstack([prog.Aeq, prog.A, eye[fu], -eye[fl]]).tocsc()
    b = np.concatenate([prog.beq, prog.b, prog.ub[fu], -prog.lb[fl]])
    cones = [clarabel.ZeroConeT(prog.Aeq.shape[0]), clarabel.NonnegativeConeT(A.shape[0] - prog.Aeq.shape[0])]
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = settings.tol_gap_rel = settings.tol_feas = tol
    res = clarabel.DefaultSolver(sp.triu(prog.H).tocsc(), prog.f, A, b, cones, settings).solve()
    status = str(res.status)
    if status == "PrimalInfeasible":
        return ProgramResult(np.full(n, np.nan), np.inf, "infeasible", np.inf, np.inf)
    if status == "DualInfeasible":
        return ProgramResult(np.full(n, np.nan), -np.inf, "unbounded", np.nan, np.nan)
    if status not in ("Solved", "AlmostSolved"):
        raise NumericalFailure(f"Clarabel stopped with status {status}")
    x = np.array(res.x)
    z = np.array(res.z)
    m_eq, m_in = prog.Aeq.shape[0], prog.A.shape[0]
    # map to the HiGHS-style multipliers used by kkt_residuals
    y = -z[: m_eq + m_in]
    zb = np.zeros(n)
    nu = int(fu.sum())
    zb[fu] -= z[m_eq + m_in : m_eq + m_in + nu]
    zb[fl] += z[m_eq + m_in + nu :]
    primal, kkt = kkt_residuals(prog, x, y, zb)
    obj = float(0.5 * x @ (prog.H @ x) + prog.f @ x)
    st: Status = "optimal" if status == "Solved" and max(primal, kkt) <= KKT_TOL else "tolerance-not-met"
    return ProgramResult(x, obj, st, primal, kkt)


def kkt_residuals(prog: LinearQuadraticProgram, x: np.ndarray, y: np.ndarray, z: np.ndarray) -> tuple[float, float]:
    """Max-norm primal infeasibility and stationarity residual.

    Uses the HiGHS sign convention ``z = Hx + f - M'y`` for the column duals.
    """
    res = [0.0]
    if prog.Aeq.shape[0]:
        res.append(np.max(np.abs(prog.Aeq @ x - prog.beq)))
    if prog.A.shape[0]:
        res.append(max(0.0, float(np.max(prog.A @ x - prog.b))))
    res.append(max(0.0, float(np.max(prog.lb - x))))
    res.append(max(0.0, float(np.max(x - prog.ub))))
    M = sp.vstack([prog.Aeq, prog.A]).tocsr()
    grad = prog.H @ x + prog.f
    stat = np.max(np.abs(grad - M.T @ y - z)) if x.size else 0.0
    return float(max(res)), float(stat)


def solution_from_result(prog: LinearQuadraticProgram, res: ProgramResult, prefix: str = "") -> OcpSolution:
    lay = prog.layout
    u, xi1, xi2 = (res.x[lay[prefix + name]] for name in ("u", "xi1", "xi2"))
    defect = np.nan
    if res.status == "optimal":
        defect = trapezoid_defect(prog.times, xi1, xi2, u, prog_meta(prog, prefix))
    return OcpSolution(
        times=prog.times, xi1=xi1, xi2=xi2, u=u, objective=res.objective, status=res.status,
        defect_residual=defect, kkt_residual=res.kkt_residual,
    )


def prog_meta(prog: LinearQuadraticProgram, prefix: str) -> tuple[float, float]:
    meta = prog.meta.get(prefix.rstrip("/"), prog.meta) if prefix else prog.meta
    return meta["k"], meta["J"]


def trapezoid_defect(times, xi1, xi2, u, kJ: tuple[float, float]) -> float:
    k, J = kJ
    h = np.diff(times)
    d1 = xi1[1:] - xi1[:-1] - 0.5 * h * (xi2[:-1] + xi2[1:])
    f2 = (u - k * xi1) / J
    d2 = xi2[1:] - xi2[:-1] - 0.5 * h * (f2[:-1] + f2[1:])
    return float(max(np.max(np.abs(d1)), np.max(np.abs(d2))))


def solve_ocp(program: LinearQuadraticProgram, solver: ProgramSolver | None = None) -> OcpSolution:
    """Solve a single-plant program; infeasible/unbounded are reported as a status."""
    solver = ProgramSolver(warm_start=False) if solver is None else solver
    res = solver.solve(program)
    sol = solution_from_result(program, res)
    if sol.ok:
        u_min = program.meta.get("u_min", np.min(program.lb[program.layout["u"]]))
        u_max = program.meta.get("u_max", np.max(program.ub[program.layout["u"]]))
        sol.switch_time = _switch_time(sol.times, sol.u, u_min, u_max)
    return sol


def switch_time(solution: OcpSolution, config: SasaConfig) -> float | None:
    """First zero crossing of ``u`` between its two bounds (linear interpolation).

    A node counts as "at a bound" within ``1e-3 * (u_max - u_min)``.
    Returns ``None`` when the control never moves from one bound to the
    other through zero.
    """
    return _switch_time(solution.times, solution.u, config.u_min, config.u_max)


def _switch_time(times: np.ndarray, u: np.ndarray, u_min: float, u_max: float) -> float | None:
    u = np.asarray(u, dtype=float)
    if u.size < 2 or not np.all(np.isfinite(u)):
        return None
    band = 1e-3 * (u_max - u_min)
    at = np.where(np.abs(u - u_max) <= band, 1, np.where(np.abs(u - u_min) <= band, -1, 0))
    last = 0
    for i in range(u.size - 1):
        if at[i] != 0:
            last = at[i]
        if last == 0:
            continue
        a, b = u[i], u[i + 1]
        if np.sign(a) == last and np.sign(b) == -last or (b == 0.0 and a != 0.0 and np.sign(a) == last):
            # crossing must land on the opposite bound before returning
            j = i + 1
            while j < u.size and at[j] == 0:
                j += 1
            if j == u.size or at[j] != -last:
                continue
            return float(times[i] + (times[i + 1] - times[i]) * a / (a - b))
    return None


def dump_triplets(program: LinearQuadraticProgram, path: str | Path) -> None:
    """Write the program as plain-text sparse triplets (sections H/A/Aeq/bounds)."""
    lines = [f"# n_vars {program.n_vars}"]
    for name, M, rhs in (("H", program.H, None), ("A", program.A, program.b), ("Aeq", program.Aeq, program.beq)):
        C = M.tocoo()
        lines.append(f"[{name}] {M.shape[0]} {M.shape[1]} {C.nnz}")
        order = np.lexsort((C.col, C.row))
        lines += [f"{C.row[j]} {C.col[j]} {C.data[j]:.17g}" for j in order]
        if rhs is not None:
            lines.append(f"[{name}_rhs] {rhs.size}")
            lines += [f"{v:.17g}" for v in rhs]
    lines.append(f"[f] {program.n_vars}")
    lines += [f"{v:.17g}" for v in program.f]
    lines.append(f"[bounds] {program.n_vars}")
    lines += [f"{lo:.17g} {hi:.17g}" for lo, hi in zip(program.lb, program.ub)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_triplets(path: str | Path) -> dict[str, object]:
    """Inverse of :func:`dump_triplets`, returning matrices and vectors."""
    text = Path(path).read_text().splitlines()
    out: dict[str, object] = {}
    n_vars = int(text[0].split()[-1])
    i = 1
    while i < len(text):
        head = text[i].split()
        name = head[0].strip("[]")
        i += 1
        if name in ("H", "A", "Aeq"):
            r, c, nnz = map(int, head[1:])
            trip = np.array([list(map(float, text[i + j].split())) for j in range(nnz)]).reshape(-1, 3)
            out[name] = sp.csr_matrix((trip[:, 2], (trip[:, 0].astype(int), trip[:, 1].astype(int))), shape=(r, c))
            i += nnz
        elif name == "bounds":
            arr = np.array([list(map(float, text[i + j].split())) for j in range(n_vars)])
            out["lb"], out["ub"] = arr[:, 0], arr[:, 1]
            i += n_vars
        else:
            cnt = int(head[1])
            out[name] = np.array([float(text[i + j]) for j in range(cnt)])
            i += cnt
    return out
