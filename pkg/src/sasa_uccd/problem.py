"""Simple strain-actuated solar array (SASA) problem instance.

Holds the configuration shared by every formulation, the uncertain
quantity descriptors, the constraint-shift helper for simple bounds and
the vertex enumeration of the crisp (box) uncertainty set.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Literal, Sequence

QuantityKind = Literal["gaussian", "crisp-uniform"]

#: canonical column order of the uncertain basic quantities
QUANTITY_NAMES = ("k", "J", "xi2_0")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class InfeasibleShiftError(ValueError):
    """Shifted bounds leave an empty interval."""


@dataclass(frozen=True)
class Sigmas:
    sigma_k: float = 0.20
    sigma_J: float = 0.15
    sigma_xi2_0: float = 0.03


@dataclass(frozen=True)
class SasaConfig:
    """Plant data, bounds, grids, uncertainty descriptors and solver settings.

    ``u_min``, ``u_max``, ``t0`` and ``tf`` are not printed with the
    original results; the defaults are the values for which the
    deterministic design reproduces the published optimum.
    """

    t0: float = 0.0
    tf: float = 1.0
    n_t: int = 100
    u_min: float = -1.0
    u_max: float = 1.0
    mu_J: float = 1.0
    mu_xi2_0: float = 0.0
    k_bounds: tuple[float, float] = (0.6, 10.0)
    k_s: float = 3.0
    sigma: Sigmas = field(default_factory=Sigmas)
    s_f: float = 1.0
    seed: int = 20220101
    solver_tol: float = 1e-6
    # experiment settings
    n_mcs: int = 10_000
    gpc_nodes: int = 10
    gpc_order: int = 8
    outer_max_iter: int = 200
    msc_penalty_weight: float = 1e3
    msc_soft_stationarity: bool = True
    msc_aggregate: str = "mean"
    robust_horizon_steps: int = 1
    kp: float = 1e4
    tf_sim: float = 5.0
    n_closed_loop: int = 10_000

    def __post_init__(self) -> None:
        object.__setattr__(self, "k_bounds", tuple(float(v) for v in self.k_bounds))
        if isinstance(self.sigma, dict):
            object.__setattr__(self, "sigma", Sigmas(**self.sigma))
        self.validate()

    def validate(self) -> None:
        if not self.t0 < self.tf:
            raise ConfigError(f"t0={self.t0} must be < tf={self.tf}")
        if self.n_t < 2:
            raise ConfigError(f"n_t={self.n_t} must be >= 2")
        if not self.u_min < self.u_max:
            raise ConfigError("u_min must be < u_max")
        if min(dataclasses.astuple(self.sigma)) < 0:
            raise ConfigError("standard deviations must be >= 0")
        if self.k_s < 0 or self.s_f < 0:
            raise ConfigError("k_s and s_f must be >= 0")
        lo, hi = self.k_bounds
        if not lo <= hi:
            raise ConfigError(f"k_bounds {self.k_bounds} are reversed")
        # plant-variable shift: mu_k >= k_s * sigma_k for any boundary design
        if lo < self.k_s * self.scaled_sigma("k") - 1e-12:
            raise ConfigError(
                f"k_bounds lower {lo} is below the shifted bound "
                f"k_s*s_f*sigma_k = {self.k_s * self.scaled_sigma('k')}"
            )
        if self.n_mcs < 1 or self.gpc_nodes < 1 or self.gpc_order < 0:
            raise ConfigError("sample and node counts must be positive")
        if self.robust_horizon_steps < 1 or self.msc_penalty_weight <= 0:
            raise ConfigError("robust horizon must be >= 1 step and penalty weight > 0")
        if self.msc_aggregate not in ("mean", "worst"):
            raise ConfigError(f"msc_aggregate must be 'mean' or 'worst', got {self.msc_aggregate!r}")
        if self.kp < 0 or self.tf_sim < self.tf:
            raise ConfigError("kp must be >= 0 and tf_sim >= tf")

    @property
    def h(self) -> float:
        return (self.tf - self.t0) / (self.n_t - 1)

    def scaled_sigma(self, name: str) -> float:
        base = {"k": self.sigma.sigma_k, "J": self.sigma.sigma_J, "xi2_0": self.sigma.sigma_xi2_0}
        return self.s_f * base[name]

    def quantities(self, kind: QuantityKind = "gaussian") -> list[UncertainQuantity]:
        """Uncertain quantities in canonical order; stiffness is a zero-mean offset."""
        means = {"k": 0.0, "J": self.mu_J, "xi2_0": self.mu_xi2_0}
        return [
            UncertainQuantity.from_sigma(name, means[name], self.scaled_sigma(name), self.k_s, kind)
            for name in QUANTITY_NAMES
        ]

    def replace(self, **changes: Any) -> SasaConfig:
        return dataclasses.replace(self, **changes)

    def with_sigmas(self, sigma_k: float, sigma_J: float, sigma_xi2_0: float) -> SasaConfig:
        return self.replace(sigma=Sigmas(sigma_k, sigma_J, sigma_xi2_0))

    # JSON -----------------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["k_bounds"] = list(self.k_bounds)
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SasaConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        if "sigma" in data:
            sig = data["sigma"]
            bad = set(sig) - {f.name for f in dataclasses.fields(Sigmas)}
            if bad:
                raise ConfigError(f"unknown sigma keys: {sorted(bad)}")
            data["sigma"] = Sigmas(**sig)
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> SasaConfig:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config JSON must be an object")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path: str | Path) -> SasaConfig:
        return cls.from_json(Path(path).read_text())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")


@dataclass(frozen=True)
class UncertainQuantity:
    name: str
    mean: float
    std: float
    kind: QuantityKind = "gaussian"
    half_width: float = 0.0

    def __post_init__(self) -> None:
        if self.std < 0 or self.half_width < 0:
            raise ConfigError(f"{self.name}: std and half_width must be >= 0")
        if self.kind not in ("gaussian", "crisp-uniform"):
            raise ConfigError(f"{self.name}: unknown kind {self.kind!r}")

    @classmethod
    def from_sigma(
        cls, name: str, mean: float, std: float, k_s: float, kind: QuantityKind = "gaussian"
    ) -> UncertainQuantity:
        return cls(name, float(mean), float(std), kind, float(k_s * std))

    @property
    def interval(self) -> tuple[float, float]:
        return self.mean - self.half_width, self.mean + self.half_width


@dataclass(frozen=True)
class PolytopeVertex:
    """One corner of the box uncertainty set.

    ``signs`` holds -1/+1 per quantity (0 for a collapsed dimension).
    """

    names: tuple[str, ...]
    coords: tuple[float, ...]
    signs: tuple[int, ...]

    def __getitem__(self, name: str) -> float:
        return self.coords[self.names.index(name)]

    @property
    def k(self) -> float:
        return self["k"]

    @property
    def J(self) -> float:
        return self["J"]

    @property
    def xi2_0(self) -> float:
        return self["xi2_0"]

    def sign_of(self, name: str) -> int:
        return self.signs[self.names.index(name)]

    def label(self) -> str:
        return ",".join(f"{n}{'+' if s > 0 else '-' if s < 0 else '0'}" for n, s in zip(self.names, self.signs))


def default_instance() -> SasaConfig:
    """Default experiment configuration (deterministic; identical on every call)."""
    return SasaConfig()


def shift_bounds(lower: float, upper: float, k_s: float, sigma: float) -> tuple[float, float]:
    """Tighten simple bounds by ``k_s * sigma`` on each side."""
    if not upper > lower:
        raise ValueError(f"upper={upper} must exceed lower={lower}")
    margin = k_s * sigma
    if upper - lower <= 2.0 * margin:
        raise InfeasibleShiftError(
            f"interval [{lower}, {upper}] cannot absorb a shift of {margin} on each side"
        )
    return lower + margin, upper - margin


def polytope_vertices(quantities: Sequence[UncertainQuantity], mu_k: float = 0.0) -> list[PolytopeVertex]:
    """Enumerate the corners of the box ``mean +/- half_width``.

    The stiffness quantity (named ``"k"``) is centred on ``mu_k`` plus its
    own mean, since it is carried as an offset. Dimensions with zero
    half-width collapse, so ``2**n`` vertices are returned where ``n``
    counts the quantities with positive half-width. Sign patterns are
    ordered lexicographically, all-minus first, first quantity slowest.
    """
    names = tuple(q.name for q in quantities)
    centres = [q.mean + (mu_k if q.name == "k" else 0.0) for q in quantities]
    choices: list[Iterable[int]] = [(-1, 1) if q.half_width > 0 else (0,) for q in quantities]
    out = []
    for signs in itertools.product(*choices):
        coords = tuple(c + s * q.half_width for c, s, q in zip(centres, signs, quantities))
        out.append(PolytopeVertex(names, coords, tuple(signs)))
    return out
