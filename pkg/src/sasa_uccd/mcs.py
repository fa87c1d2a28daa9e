"""Monte Carlo sampling of the uncertain basic quantities and moment estimators."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .problem import UncertainQuantity

SamplingMode = Literal["stochastic", "crisp"]

RNG_ALGORITHM = "numpy.random.Generator(PCG64)"


@dataclass(frozen=True)
class SampleSet:
    """``N x n_x`` realizations; stiffness is stored as a zero-mean offset ``dk``."""

    values: np.ndarray
    names: tuple[str, ...]
    kinds: tuple[str, ...]
    seed: int
    mode: SamplingMode
    rng: str = RNG_ALGORITHM

    def __len__(self) -> int:
        return self.values.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def plants(self, mu_k: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Physical ``(k, J, xi2_0)`` arrays for a design mean stiffness ``mu_k``."""
        return mu_k + self.column("k"), self.column("J"), self.column("xi2_0")

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.names)
            w.writerows(self.values.tolist())


def draw_samples(
    quantities: Sequence[UncertainQuantity],
    N: int,
    seed: int,
    mode: SamplingMode = "stochastic",
) -> SampleSet:
    """Independent draws per quantity: Gaussian ``N(mean, std)`` or uniform ``mean +/- half_width``.

    The whole matrix comes from one generator stream, so identical
    arguments give bitwise-identical output.
    """
    if N < 1:
        raise ValueError(f"sample count must be >= 1, got {N}")
    if mode not in ("stochastic", "crisp"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    rng = np.random.default_rng(seed)
    means = np.array([q.mean for q in quantities])
    if mode == "stochastic":
        scale = np.array([q.std for q in quantities])
        vals = means + scale * rng.standard_normal((N, len(quantities)))
        kinds = tuple("gaussian" for _ in quantities)
    else:
        hw = np.array([q.half_width for q in quantities])
        vals = means + hw * rng.uniform(-1.0, 1.0, (N, len(quantities)))
        kinds = tuple("crisp-uniform" for _ in quantities)
    return SampleSet(vals, tuple(q.name for q in quantities), kinds, int(seed), mode)


def mcs_estimates(values: Sequence[float] | np.ndarray) -> tuple[float, float | None]:
    """Unbiased sample mean and variance (``1/(N-1)`` divisor); variance is ``None`` for one value."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("need at least one value")
    mean = float(np.mean(v))
    if v.size < 2:
        return mean, None
    return mean, float(np.var(v, ddof=1))


@dataclass(frozen=True)
class Band:
    mean: np.ndarray
    std: np.ndarray
    p10: np.ndarray
    p50: np.ndarray
    p90: np.ndarray
    p100: np.ndarray

    def percentile(self, p: int) -> np.ndarray:
        return {10: self.p10, 50: self.p50, 90: self.p90, 100: self.p100}[p]


def nearest_rank(data: np.ndarray, p: float, axis: int = 0) -> np.ndarray:
    """Nearest-rank percentile: the smallest value with at least ``p`` percent at or below it."""
    return np.percentile(data, p, axis=axis, method="inverted_cdf")


def pointwise_band(trajectories: Sequence[Sequence[float]] | np.ndarray) -> Band:
    """Per-node mean, sample std and nearest-rank p10/p50/p90/p100."""
    if isinstance(trajectories, np.ndarray):
        X = trajectories
    else:
        lengths = {len(t) for t in trajectories}
        if len(lengths) > 1:
            raise ValueError(f"trajectories have unequal lengths {sorted(lengths)}")
        X = np.asarray(trajectories, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need at least two equal-length trajectories")
    p100 = X.max(axis=0)
    const = X.min(axis=0) == p100
    # constant nodes: exact zero spread, no round-off from the mean
    return Band(
        mean=np.where(const, p100, X.mean(axis=0)),
        std=np.where(const, 0.0, X.std(axis=0, ddof=1)),
        p10=nearest_rank(X, 10),
        p50=nearest_rank(X, 50),
        p90=nearest_rank(X, 90),
        p100=p100,
    )
