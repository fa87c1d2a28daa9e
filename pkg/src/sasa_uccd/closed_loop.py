"""Reference tracking with saturated proportional velocity feedback.

Between reference breakpoints the plant and the feedback law are linear,
so each mode (unsaturated, saturated high, saturated low) is propagated
with an exact matrix exponential of an augmented system carrying the
affine reference signal. Saturation switches are located by a
safeguarded Newton iteration on the switching time.
All samples of a chunk advance together.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal, Sequence

import numpy as np
from scipy.linalg import expm

from .mcs import SamplingMode, draw_samples, nearest_rank
from .problem import SasaConfig

SourceTag = Literal["DET", "SE-p10", "SE-p50", "SE-p90", "SE-p100", "WCR"]

SETTLE_BAND = 2e-4
N_BINS = 50
OUTPUT_POINTS = 1001
SUBSTEPS = 10
CHUNK = 2500
# failed samples are dropped below this fraction of N, otherwise the run aborts
MAX_FAILED_FRACTION = 1e-3
_UNSAT, _HIGH, _LOW = 0, 1, 2


class SimulationError(RuntimeError):
    """Integration failed for one or more plant samples."""

    def __init__(self, message: str, samples: np.ndarray | None = None) -> None:
        super().__init__(message)
        self.samples = samples


@dataclass(frozen=True)
class ReferenceTrajectory:
    times: np.ndarray
    u_ref: np.ndarray
    xi2_ref: np.ndarray
    source: str
    percentile: int | None = None

    def __post_init__(self) -> None:
        if not (self.times.shape == self.u_ref.shape == self.xi2_ref.shape):
            raise ValueError("reference vectors must have equal lengths")

    @property
    def tf(self) -> float:
        return float(self.times[-1])


def build_reference(
    source: str,
    times: np.ndarray,
    u: np.ndarray,
    xi2: np.ndarray,
    config: SasaConfig,
    percentile: int | None = None,
) -> ReferenceTrajectory:
    """Reference from one trajectory (``percentile=None``) or a per-node percentile of a bundle.

    ``u`` and ``xi2`` are 1-D for nominal mode or ``(realizations, nodes)``
    for percentile mode. The control reference is clipped to its bounds.
    """
    u = np.asarray(u, dtype=float)
    xi2 = np.asarray(xi2, dtype=float)
    if percentile is None:
        if u.ndim != 1:
            raise ValueError("nominal mode needs a single trajectory")
        ur, xr = u, xi2
    else:
        if u.ndim != 2 or u.shape[0] < 1:
            raise ValueError("percentile mode needs a trajectory bundle")
        if percentile not in (10, 50, 90, 100):
            raise ValueError(f"unsupported percentile {percentile}")
        ur = u.max(axis=0) if percentile == 100 else nearest_rank(u, percentile)
        xr = xi2.max(axis=0) if percentile == 100 else nearest_rank(xi2, percentile)
    return ReferenceTrajectory(
        np.asarray(times, dtype=float).copy(), np.clip(ur, config.u_min, config.u_max), xr.copy(), source, percentile
    )


# ---------------------------------------------------------------------------
# exact propagation


def _mode_matrices(k: np.ndarray, J: np.ndarray, kp: float, mode: int) -> np.ndarray:
    """Augmented generators ``[[A, B, 0], [0, 0, 1], [0, 0, 0]]`` per sample."""
    M = np.zeros((k.size, 4, 4))
    M[:, 0, 1] = 1.0
    M[:, 1, 0] = -k / J
    if mode == _UNSAT:
        M[:, 1, 1] = -kp / J
    M[:, 1, 2] = 1.0 / J
    M[:, 2, 3] = 1.0
    return M


def _propagate(M: np.ndarray, tau: np.ndarray, x: np.ndarray, c0: np.ndarray, c1: np.ndarray) -> np.ndarray:
    E = expm(M * tau[:, None, None])
    return np.einsum("nij,nj->ni", E[:, :2, :2], x) + E[:, :2, 2] * c0[:, None] + E[:, :2, 3] * c1[:, None]


@dataclass
class _Segment:
    t0: float
    h: float
    w0: np.ndarray | float  # unsaturated input u_ref + kp*xi2_ref at segment start
    w1: float  # its slope
    u_ref0: float
    u_ref1: float


def _segments(ref: ReferenceTrajectory, kp: float, tf_sim: float, substeps: int) -> list[_Segment]:
    t, u, x = ref.times, ref.u_ref, ref.xi2_ref
    segs = []
    for j in range(t.size - 1):
        H = t[j + 1] - t[j]
        du = (u[j + 1] - u[j]) / H
        dx = (x[j + 1] - x[j]) / H
        for s in range(substeps):
            a = t[j] + s * H / substeps
            uu = u[j] + du * (a - t[j])
            xx = x[j] + dx * (a - t[j])
            segs.append(_Segment(a, H / substeps, uu + kp * xx, du + kp * dx, uu, du))
    h_ref = (t[-1] - t[0]) / (t.size - 1) / substeps
    n_tail = int(math.ceil((tf_sim - ref.tf) / h_ref - 1e-9)) if tf_sim > ref.tf else 0
    for s in range(n_tail):
        a = ref.tf + s * (tf_sim - ref.tf) / n_tail
        segs.append(_Segment(a, (tf_sim - ref.tf) / n_tail, 0.0, 0.0, 0.0, 0.0))
    return segs


def _simulate_chunk(
    k: np.ndarray, J: np.ndarray, xi2_0: np.ndarray, ref: ReferenceTrajectory, kp: float,
    u_min: float, u_max: float, segs: list[_Segment],
) -> tuple[np.ndarray, np.ndarray]:
    """States at every segment boundary: ``(n_seg + 1, N, 2)`` plus the applied control there."""
    N = k.size
    gens = [_mode_matrices(k, J, kp, m) for m in (_UNSAT, _HIGH, _LOW)]
    cache: dict[float, list[np.ndarray]] = {}
    X = np.empty((len(segs) + 1, N, 2))
    U = np.empty((len(segs) + 1, N))
    x = np.stack([np.zeros(N), xi2_0], axis=1)
    X[0] = x

    def unsat_u(xx: np.ndarray, w: np.ndarray) -> np.ndarray:
        return w - kp * xx[:, 1]

    for si, sg in enumerate(segs):
        if sg.h not in cache:
            cache[sg.h] = [expm(G * sg.h) for G in gens]
        w_start = np.full(N, sg.w0, dtype=float)
        U[si] = np.clip(unsat_u(x, w_start), u_min, u_max)
        tau_done = np.zeros(N)
        mode = np.where(U[si] >= u_max, _HIGH, np.where(U[si] <= u_min, _LOW, _UNSAT))
        # a sample pinned at a bound but whose unsaturated law points inward starts unsaturated
        active = np.ones(N, dtype=bool)
        for _ in range(12):
            if not active.any():
                break
            idx = np.flatnonzero(active)
            rem = sg.h - tau_done[idx]
            w0 = sg.w0 + sg.w1 * tau_done[idx]
            c0 = np.where(mode[idx] == _UNSAT, w0, np.where(mode[idx] == _HIGH, u_max, u_min))
            c1 = np.where(mode[idx] == _UNSAT, sg.w1, 0.0)
            full = tau_done[idx] == 0.0
            xn = np.empty((idx.size, 2))
            for m in (_UNSAT, _HIGH, _LOW):
                sel = mode[idx] == m
                if not sel.any():
                    continue
                fs, ps = sel & full, sel & ~full
                if fs.any():
                    E = cache[sg.h][m]
                    ii = idx[fs]
                    xn[fs] = (np.einsum("nij,nj->ni", E[ii, :2, :2], x[ii]) + E[ii, :2, 2] * c0[fs, None]
                              + E[ii, :2, 3] * c1[fs, None])
                if ps.any():
                    ii = idx[ps]
                    xn[ps] = _propagate(gens[m][ii], rem[ps], x[ii], c0[ps], c1[ps])
            w_end = sg.w0 + sg.w1 * sg.h
            ue = unsat_u(xn, np.full(idx.size, w_end))
            tol = 1e-12 * max(1.0, abs(u_max), abs(u_min))
            m_i = mode[idx]
            leave = ((m_i == _UNSAT) & ((ue > u_max + tol) | (ue < u_min - tol))) | \
                    ((m_i == _HIGH) & (ue < u_max - tol)) | ((m_i == _LOW) & (ue > u_min + tol))
            stay = ~leave
            x[idx[stay]] = xn[stay]
            active[idx[stay]] = False
            if not leave.any():
                continue
            # safeguarded Newton on the switching time; ``hi`` always stays past the crossing
            li = idx[leave]
            c0l, c1l, ml = c0[leave], c1[leave], mode[li]
            bound = np.where(ml == _HIGH, u_max, np.where(ml == _LOW, u_min, 0.0))
            ue_l = ue[leave]
            target = np.where(ml == _UNSAT, np.where(ue_l > u_max, u_max, u_min), bound)
            sign_end = np.sign(ue_l - target)
            Gl = np.empty((li.size, 4, 4))
            for m in (_UNSAT, _HIGH, _LOW):
                s_ = ml == m
                Gl[s_] = gens[m][li[s_]]
            x_l, td = x[li], tau_done[li]
            g0 = unsat_u(x_l, sg.w0 + sg.w1 * td) - target
            g1 = ue_l - target
            lo = np.zeros(li.size)
            hi = rem[leave].copy()
            tau = np.clip(hi * g0 / np.where(g0 != g1, g0 - g1, 1.0), 0.0, hi)
            for _ in range(60):
                xm = _propagate(Gl, tau, x_l, c0l, c1l)
                g = unsat_u(xm, sg.w0 + sg.w1 * (td + tau)) - target
                dxi2 = Gl[:, 1, 0] * xm[:, 0] + Gl[:, 1, 1] * xm[:, 1] + Gl[:, 1, 2] * (c0l + c1l * tau)
                dg = sg.w1 - kp * dxi2
                past = np.sign(g) == sign_end
                hi = np.where(past, tau, hi)
                lo = np.where(past, lo, tau)
                if np.all((past & (np.abs(g) <= 1e-13)) | (hi - lo <= 1e-15 * sg.h)):
                    break
                step = tau - g / np.where(dg != 0, dg, np.inf)
                ok = (step > lo) & (step < hi)
                tau = np.where(ok, step, 0.5 * (lo + hi))
            x[li] = _propagate(Gl, hi, x[li], c0l, c1l)
            tau_done[li] += hi
            mode[li] = np.where(ml == _UNSAT, np.where(target == u_max, _HIGH, _LOW), _UNSAT)
            done = tau_done[li] >= sg.h * (1 - 1e-14)
            active[li[done]] = False
        else:
            if active.any():
                raise SimulationError("too many saturation switches within one step", np.flatnonzero(active))
        X[si + 1] = x
    w_fin = segs[-1].w0 + segs[-1].w1 * segs[-1].h if segs else 0.0
    U[-1] = np.clip(unsat_u(x, np.full(N, w_fin)), u_min, u_max)
    return X, U


def _boundary_times(segs: list[_Segment]) -> np.ndarray:
    return np.array([s.t0 for s in segs] + [segs[-1].t0 + segs[-1].h])


@dataclass
class SimulationResult:
    times: np.ndarray
    xi1: np.ndarray
    xi2: np.ndarray
    u: np.ndarray
    xi1_tf: float
    t_settle: float


def simulate_closed_loop(
    plant: tuple[float, float, float], ref: ReferenceTrajectory, kp: float, tf_sim: float, config: SasaConfig,
    *, substeps: int = SUBSTEPS,
) -> SimulationResult:
    """Track ``ref`` on one plant ``(k, J, xi2_0)``; after the reference ends it holds ``u_ref = xi2_ref = 0``."""
    if kp < 0:
        raise ValueError("gain must be >= 0")
    if tf_sim < ref.tf:
        raise ValueError("simulation must cover the reference horizon")
    k, J, x0 = (np.array([float(v)]) for v in plant)
    segs = _segments(ref, kp, tf_sim, substeps)
    X, U = _simulate_chunk(k, J, x0, ref, kp, config.u_min, config.u_max, segs)
    t = _boundary_times(segs)
    xi2 = X[:, 0, 1]
    return SimulationResult(t, X[:, 0, 0], xi2, U[:, 0], float(X[-1, 0, 0]), settling_time(t, xi2))


def settling_time(times: np.ndarray, xi2: np.ndarray, band: float = SETTLE_BAND) -> float:
    """First time after which ``|xi2|`` stays within ``band * max|xi2|``.

    Returns ``times[0]`` for an identically zero signal and ``times[-1]``
    if the last sample is still outside the band.
    """
    a = np.abs(np.asarray(xi2, dtype=float))
    peak = a.max(axis=0)
    out = a > band * peak
    if a.ndim == 1:
        hits = np.flatnonzero(out)
        if hits.size == 0:
            return float(times[0])
        return float(times[min(hits[-1] + 1, times.size - 1)])
    last = np.where(out.any(axis=0), out.shape[0] - 1 - np.argmax(out[::-1], axis=0), -1)
    return times[np.minimum(last + 1, times.size - 1)]


# ---------------------------------------------------------------------------
# statistics over sampled plants


@dataclass
class ClosedLoopStats:
    system: str
    sampling: str
    n_samples: int
    seed: int
    kp: float
    mu_k: float
    mean_xi1_tf: float
    std_xi1_tf: float
    t_settle: float  # median over samples
    hist_edges: np.ndarray
    hist_prob: np.ndarray
    response_times: np.ndarray
    response: dict[str, np.ndarray] = field(default_factory=dict)
    xi1_tf: np.ndarray | None = None
    settle_times: np.ndarray | None = None
    n_failed: int = 0

    def summary(self) -> dict[str, Any]:
        return {
            "system": self.system, "sampling": self.sampling, "n_samples": self.n_samples, "seed": self.seed,
            "kp": self.kp, "mu_k": self.mu_k, "mean_xi1_tf": self.mean_xi1_tf, "std_xi1_tf": self.std_xi1_tf,
            "t_settle": self.t_settle, "n_failed": self.n_failed,
        }

    def histogram_rows(self) -> list[tuple[float, float, float]]:
        e = self.hist_edges
        return [(float(e[i]), float(e[i + 1]), float(p)) for i, p in enumerate(self.hist_prob)]

    def write_histogram_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_left", "bin_right", "probability"])
            w.writerows([[repr(a), repr(b), repr(p)] for a, b, p in self.histogram_rows()])

    def write_response_csv(self, path: str | Path) -> None:
        cols = list(self.response)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time"] + cols)
            for i, t in enumerate(self.response_times):
                w.writerow([repr(float(t))] + [repr(float(self.response[c][i])) for c in cols])


def histogram(values: np.ndarray, bins: int = N_BINS) -> tuple[np.ndarray, np.ndarray]:
    """Equal-width bins over the observed range; probabilities sum to one."""
    v = np.asarray(values, dtype=float)
    lo, hi = float(v.min()), float(v.max())
    # degenerate or near-degenerate spread: widen so the bins are resolvable
    min_span = 1e-9 * max(1.0, abs(lo), abs(hi))
    if hi - lo < min_span:
        mid = 0.5 * (lo + hi)
        lo, hi = mid - min_span, mid + min_span
    counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
    return edges, counts / v.size


def closed_loop_stats(
    system: str,
    ref: ReferenceTrajectory,
    mu_k: float,
    config: SasaConfig,
    *,
    sampling: SamplingMode = "stochastic",
    N: int | None = None,
    seed: int | None = None,
    kp: float | None = None,
    threads: int = 1,
) -> ClosedLoopStats:
    """Simulate ``N`` sampled plants around design ``mu_k`` and aggregate tracking statistics."""
    from .formulations import parallel_map

    N = config.n_closed_loop if N is None else N
    seed = config.seed if seed is None else seed
    kp = config.kp if kp is None else kp
    samples = draw_samples(config.quantities("gaussian" if sampling == "stochastic" else "crisp-uniform"), N, seed,
                           sampling)
    k, J, x20 = samples.plants(mu_k)
    segs = _segments(ref, kp, config.tf_sim, SUBSTEPS)
    t = _boundary_times(segs)
    pick = np.unique(np.searchsorted(t, np.linspace(t[0], t[-1], OUTPUT_POINTS)).clip(0, t.size - 1))
    chunks = [slice(i, min(i + CHUNK, N)) for i in range(0, N, CHUNK)]

    def run(sl: slice) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        X, _ = _simulate_chunk(k[sl], J[sl], x20[sl], ref, kp, config.u_min, config.u_max, segs)
        ok = np.isfinite(X).all(axis=(0, 2))
        return ok, X[-1, :, 0], settling_time(t, np.where(ok, X[:, :, 1], 0.0)), X[pick, :, 0], X[pick, :, 1]

    parts = parallel_map(run, chunks, threads)
    ok = np.concatenate([p[0] for p in parts])
    bad = np.flatnonzero(~ok)
    if bad.size > MAX_FAILED_FRACTION * N:
        raise SimulationError(f"non-finite states for {bad.size} of {N} samples", bad)
    xi1_tf = np.concatenate([p[1] for p in parts])[ok]
    ts = np.concatenate([p[2] for p in parts])[ok]
    R1 = np.concatenate([p[3] for p in parts], axis=1)[:, ok]
    R2 = np.concatenate([p[4] for p in parts], axis=1)[:, ok]
    response = {}
    for p in (10, 50, 90):
        response[f"xi1_p{p}"] = nearest_rank(R1, p, axis=1)
        response[f"xi2_p{p}"] = nearest_rank(R2, p, axis=1)
    edges, prob = histogram(xi1_tf)
    spread = xi1_tf.size > 1 and np.ptp(xi1_tf) > 0
    std = float(np.std(xi1_tf, ddof=1)) if spread else 0.0
    return ClosedLoopStats(
        system=system, sampling=sampling, n_samples=N, seed=seed, kp=kp, mu_k=float(mu_k),
        mean_xi1_tf=float(np.mean(xi1_tf)), std_xi1_tf=std, t_settle=float(np.median(ts)),
        hist_edges=edges, hist_prob=prob, response_times=t[pick], response=response,
        xi1_tf=xi1_tf, settle_times=ts, n_failed=int(bad.size),
    )


SYSTEMS: Sequence[tuple[str, str, int | None, SamplingMode]] = (
    ("DET-SYS", "det", None, "stochastic"),
    ("DET-SYS", "det", None, "crisp"),
    ("SE-SYS-10", "se", 10, "stochastic"),
    ("SE-SYS-50", "se", 50, "stochastic"),
    ("SE-SYS-90", "se", 90, "stochastic"),
    ("SE-SYS-100", "se", 100, "stochastic"),
    ("WCR-SYS", "wcr", None, "crisp"),
)
