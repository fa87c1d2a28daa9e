"""Non-intrusive (collocation) generalized polynomial chaos.

Univariate families are orthonormal with respect to a probability
measure (standard normal for Hermite, uniform on [-1, 1] for Legendre),
so the expansion mean is the zeroth coefficient and the variance is the
sum of squares of the remaining ones.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from numpy.polynomial import Polynomial
from scipy.linalg import eigh_tridiagonal

from .problem import UncertainQuantity

IndexMode = Literal["total_degree", "full_tensor"]


@dataclass(frozen=True)
class Family:
    """Orthonormal polynomial family given by its Jacobi recurrence.

    ``x p_k = b_{k+1} p_{k+1} + a_k p_k + b_k p_{k-1}``
    """

    name: Literal["hermite", "legendre"]

    def a(self, k: np.ndarray) -> np.ndarray:
        return np.zeros_like(np.asarray(k, dtype=float))

    def b(self, k: np.ndarray) -> np.ndarray:
        k = np.asarray(k, dtype=float)
        if self.name == "hermite":
            return np.sqrt(k)
        return k / np.sqrt(4.0 * k * k - 1.0)

    def evaluate(self, x: np.ndarray, max_degree: int) -> np.ndarray:
        """Values ``p_0..p_max_degree`` at ``x``; shape ``x.shape + (max_degree+1,)``."""
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape + (max_degree + 1,))
        out[..., 0] = 1.0
        if max_degree >= 1:
            out[..., 1] = (x - self.a(0)) / self.b(1)
        for k in range(1, max_degree):
            out[..., k + 1] = ((x - self.a(k)) * out[..., k] - self.b(k) * out[..., k - 1]) / self.b(k + 1)
        return out


HERMITE = Family("hermite")
LEGENDRE = Family("legendre")


def family_for(kind: str) -> Family:
    return HERMITE if kind == "gaussian" else LEGENDRE


def hermite_orthonormal(max_degree: int) -> list[Polynomial]:
    """Probabilists' Hermite ``He_k / sqrt(k!)`` for ``k = 0..max_degree``."""
    if max_degree < 0:
        raise ValueError("max_degree must be >= 0")
    x = Polynomial([0.0, 1.0])
    he = [Polynomial([1.0]), x]
    for k in range(1, max_degree):
        he.append(x * he[k] - k * he[k - 1])
    return [he[k] / math.sqrt(math.factorial(k)) for k in range(max_degree + 1)]


def legendre_orthonormal(max_degree: int) -> list[Polynomial]:
    """``sqrt(2k+1) P_k`` (orthonormal under the uniform probability on [-1, 1])."""
    if max_degree < 0:
        raise ValueError("max_degree must be >= 0")
    return [
        np.polynomial.Legendre.basis(k).convert(kind=Polynomial) * math.sqrt(2 * k + 1)
        for k in range(max_degree + 1)
    ]


def gauss_nodes(family: Family, q: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss rule for the family's probability weight (Golub-Welsch).

    Nodes are the eigenvalues of the symmetric tridiagonal Jacobi matrix;
    weights are the squared first eigenvector components and sum to one.
    Exact for polynomials of degree ``<= 2q - 1``.
    """
    if q < 1:
        raise ValueError("need at least one node")
    k = np.arange(q)
    diag = family.a(k)
    off = family.b(np.arange(1, q))
    nodes, vecs = eigh_tridiagonal(diag, off)
    weights = vecs[0] ** 2
    # symmetric weights: enforce exact symmetry of the rule
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    return nodes, weights / weights.sum()


def tensor_grid(per_dim: Sequence[tuple[Family, int]]) -> tuple[np.ndarray, np.ndarray]:
    """Full tensor product of univariate rules; dimension 1 varies slowest."""
    if len(per_dim) < 1:
        raise ValueError("need at least one dimension")
    rules = [gauss_nodes(fam, q) for fam, q in per_dim]
    grids = np.meshgrid(*[r[0] for r in rules], indexing="ij")
    wgrids = np.meshgrid(*[r[1] for r in rules], indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    weights = np.prod(np.stack([w.ravel() for w in wgrids], axis=1), axis=1)
    return nodes, weights


def multi_index_set(n_x: int, mode: IndexMode = "full_tensor", order: int = 8) -> list[tuple[int, ...]]:
    """Multi-indices with total degree ``<= order`` or max degree ``<= order``.

    Graded lexicographic order: by total degree, then the first
    coordinate descending; the zero index comes first.
    """
    if n_x < 1 or order < 0:
        raise ValueError("n_x must be >= 1 and order >= 0")
    if mode == "total_degree":
        idx = [k for k in itertools.product(range(order + 1), repeat=n_x) if sum(k) <= order]
    elif mode == "full_tensor":
        idx = list(itertools.product(range(order + 1), repeat=n_x))
    else:
        raise ValueError(f"unknown index mode {mode!r}")
    return sorted(idx, key=lambda k: (sum(k), tuple(-v for v in k)))


@dataclass(frozen=True)
class GpcBasis:
    families: tuple[Family, ...]
    indices: np.ndarray  # (M, n_x)
    gamma: np.ndarray  # (M,) squared norms, all 1 for orthonormal families
    nodes: np.ndarray  # (Q, n_x) standard-space collocation nodes
    weights: np.ndarray  # (Q,)
    Phi: np.ndarray  # (Q, M)

    @property
    def n_x(self) -> int:
        return len(self.families)

    @property
    def M(self) -> int:
        return self.indices.shape[0]

    @property
    def Q(self) -> int:
        return self.nodes.shape[0]

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Basis matrix at arbitrary standard-space points ``x`` (P, n_x)."""
        return _basis_matrix(self.families, self.indices, np.atleast_2d(x))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i + 1}" for i in range(self.n_x)] + ["weight"])
            for row, wt in zip(self.nodes, self.weights):
                w.writerow([repr(float(v)) for v in row] + [repr(float(wt))])


def _basis_matrix(families: Sequence[Family], indices: np.ndarray, x: np.ndarray) -> np.ndarray:
    deg = indices.max(axis=0)
    Phi = np.ones((x.shape[0], indices.shape[0]))
    for d, fam in enumerate(families):
        vals = fam.evaluate(x[:, d], int(deg[d]))
        Phi *= vals[:, indices[:, d]]
    return Phi


def build_basis(
    families: Sequence[Family],
    nodes_per_dim: int | Sequence[int] = 10,
    mode: IndexMode = "full_tensor",
    order: int = 8,
) -> GpcBasis:
    """Steps 1-2 of collocation gPC: multivariate basis and tensor quadrature grid."""
    families = tuple(families)
    qs = [nodes_per_dim] * len(families) if isinstance(nodes_per_dim, int) else list(nodes_per_dim)
    nodes, weights = tensor_grid(list(zip(families, qs)))
    indices = np.array(multi_index_set(len(families), mode, order), dtype=int)
    Phi = _basis_matrix(families, indices, nodes)
    return GpcBasis(families, indices, np.ones(indices.shape[0]), nodes, weights, Phi)


@dataclass(frozen=True)
class GpcExpansion:
    coefficients: np.ndarray  # (M,) or (M, T) for trajectories
    basis: GpcBasis

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.basis.evaluate(x) @ self.coefficients


def gpc_project(values_at_nodes: np.ndarray, basis: GpcBasis) -> GpcExpansion:
    """Quadrature projection ``y_m = sum_j y(x_j) Phi_m(x_j) w_j / gamma_m``."""
    y = np.asarray(values_at_nodes, dtype=float)
    if y.shape[0] != basis.Q:
        raise ValueError(f"expected {basis.Q} node values, got {y.shape[0]}")
    wy = basis.weights[:, None] * y.reshape(basis.Q, -1)
    coef = (basis.Phi.T @ wy) / basis.gamma[:, None]
    return GpcExpansion(coef.reshape((basis.M,) + y.shape[1:]), basis)


def gpc_moments(expansion: GpcExpansion) -> tuple[np.ndarray | float, np.ndarray | float]:
    """Mean (zeroth coefficient) and variance (sum of squared higher coefficients)."""
    c = expansion.coefficients
    g = expansion.basis.gamma.reshape((-1,) + (1,) * (c.ndim - 1))
    mean = c[0]
    var = np.sum(g[1:] * c[1:] ** 2, axis=0)
    if np.ndim(mean) == 0:
        return float(mean), float(var)
    return mean, var


def scale_nodes(standard: np.ndarray, quantity: UncertainQuantity, mean: float | None = None) -> np.ndarray:
    """Map standard-space nodes to physical values of ``quantity``.

    Gaussian: ``mean + std * x``; crisp-uniform: ``mean + half_width * x``.
    ``mean`` overrides the quantity mean (outer-loop stiffness).
    """
    m = quantity.mean if mean is None else mean
    scale = quantity.std if quantity.kind == "gaussian" else quantity.half_width
    return m + scale * np.asarray(standard, dtype=float)
