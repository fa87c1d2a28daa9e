import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sasa_uccd.gpc import (
    HERMITE,
    LEGENDRE,
    GpcExpansion,
    build_basis,
    gauss_nodes,
    gpc_moments,
    gpc_project,
    hermite_orthonormal,
    legendre_orthonormal,
    multi_index_set,
    scale_nodes,
    tensor_grid,
)
from sasa_uccd.mcs import draw_samples
from sasa_uccd.problem import UncertainQuantity, default_instance


@pytest.fixture(scope="module")
def basis3():
    return build_basis([HERMITE] * 3, 10, "full_tensor", 8)


def test_hermite_low_degrees():
    He = hermite_orthonormal(2)
    assert He[0](0.3) == 1.0
    assert He[2](0.0) == pytest.approx(-1 / math.sqrt(2), abs=1e-15)


@pytest.mark.parametrize("fam, polys", [(HERMITE, hermite_orthonormal), (LEGENDRE, legendre_orthonormal)])
def test_recurrence_matches_explicit_polynomials(fam, polys):
    x = np.linspace(-2, 2, 17)
    P = polys(8)
    np.testing.assert_allclose(fam.evaluate(x, 8), np.stack([p(x) for p in P], axis=-1), atol=1e-9)


@pytest.mark.parametrize("fam", [HERMITE, LEGENDRE])
def test_gram_matrix_is_identity(fam):
    x, w = gauss_nodes(fam, 10)
    V = fam.evaluate(x, 8)
    np.testing.assert_allclose(V.T @ (w[:, None] * V), np.eye(9), atol=1e-10)


def test_hermite_two_nodes():
    x, w = gauss_nodes(HERMITE, 2)
    np.testing.assert_allclose(x, [-1, 1], atol=1e-15)
    np.testing.assert_allclose(w, [0.5, 0.5], atol=1e-15)


def test_hermite_three_nodes():
    x, w = gauss_nodes(HERMITE, 3)
    # oracle: moment matching E[x^p] = 0, 1, 0, 3, 0 for p = 1..5
    np.testing.assert_allclose(x, [-math.sqrt(3), 0, math.sqrt(3)], atol=1e-14)
    np.testing.assert_allclose(w, [1 / 6, 2 / 3, 1 / 6], atol=1e-14)
    for p, m in enumerate([1, 0, 1, 0, 3, 0]):
        assert w @ x**p == pytest.approx(m, abs=1e-13)


def test_hermite_eighth_moment():
    x, w = gauss_nodes(HERMITE, 10)
    assert abs(w @ x**8 - 105) <= 1e-9


def test_nodes_match_numpy_tables():
    x, w = gauss_nodes(HERMITE, 10)
    xr, wr = np.polynomial.hermite_e.hermegauss(10)
    np.testing.assert_allclose(x, xr, atol=1e-13)
    np.testing.assert_allclose(w, wr / wr.sum(), atol=1e-14)
    x, w = gauss_nodes(LEGENDRE, 7)
    xr, wr = np.polynomial.legendre.leggauss(7)
    np.testing.assert_allclose(x, xr, atol=1e-14)
    np.testing.assert_allclose(w, wr / 2, atol=1e-14)


@given(q=st.integers(1, 12), fam=st.sampled_from([HERMITE, LEGENDRE]))
def test_quadrature_exactness(q, fam):
    x, w = gauss_nodes(fam, q)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    for p in range(2 * q):
        if fam is HERMITE:
            exact = 0.0 if p % 2 else float(math.prod(range(p - 1, 0, -2)))
        else:
            exact = 0.0 if p % 2 else 1.0 / (p + 1)
        # exact summation with scalar powers: odd moments cancel terms of size ~1e13
        got = math.fsum(float(wi) * float(xi) ** p for wi, xi in zip(w, x))
        assert got == pytest.approx(exact, rel=1e-9, abs=1e-9)


def test_tensor_grid_shapes():
    nodes, w = tensor_grid([(HERMITE, 10)] * 3)
    assert nodes.shape == (1000, 3)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)


def test_tensor_grid_ordering():
    nodes, w = tensor_grid([(HERMITE, 2), (HERMITE, 3)])
    x2, w2 = gauss_nodes(HERMITE, 2)
    x3, w3 = gauss_nodes(HERMITE, 3)
    assert nodes.shape == (6, 2)
    expected = [(a, b) for a in x2 for b in x3]
    np.testing.assert_allclose(nodes, expected)
    np.testing.assert_allclose(w, [a * b for a in w2 for b in w3])


def test_tensor_moments_exact():
    nodes, w = tensor_grid([(HERMITE, 4), (LEGENDRE, 3)])
    # x1 gaussian degree <= 7, x2 uniform degree <= 5
    assert w @ (nodes[:, 0] ** 6 * nodes[:, 1] ** 4) == pytest.approx(15 * 0.2, abs=1e-12)


@pytest.mark.parametrize(
    "n_x, mode, order, M",
    [(3, "total_degree", 2, 10), (3, "full_tensor", 8, 729), (1, "total_degree", 0, 1), (2, "full_tensor", 2, 9)],
)
def test_index_set_sizes(n_x, mode, order, M):
    idx = multi_index_set(n_x, mode, order)
    assert len(idx) == M
    assert idx[0] == (0,) * n_x


def test_total_degree_count_and_order():
    idx = multi_index_set(3, "total_degree", 4)
    assert len(idx) == math.comb(4 + 3, 3)
    assert idx[:5] == [(0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1), (2, 0, 0)]
    assert [sum(k) for k in idx] == sorted(sum(k) for k in idx)


def test_discrete_orthonormality(basis3):
    G = basis3.Phi.T @ (basis3.weights[:, None] * basis3.Phi)
    assert basis3.M == 729 and basis3.Q == 1000
    np.testing.assert_allclose(G, np.eye(729), atol=1e-8)


def test_project_constant(basis3):
    c = gpc_project(np.full(basis3.Q, 2.5), basis3).coefficients
    assert c[0] == pytest.approx(2.5, abs=1e-12)
    assert np.max(np.abs(c[1:])) <= 1e-10


def test_project_recovers_basis_member(basis3):
    c = gpc_project(basis3.nodes[:, 0], basis3).coefficients
    j = [tuple(k) for k in basis3.indices].index((1, 0, 0))
    assert c[j] == pytest.approx(1.0, abs=1e-10)
    assert np.max(np.abs(np.delete(c, j))) <= 1e-10


def test_moments_of_product(basis3):
    x = basis3.nodes
    m, v = gpc_moments(gpc_project(x[:, 0] * x[:, 1] ** 2, basis3))
    assert abs(m) <= 1e-10
    assert v == pytest.approx(3.0, abs=1e-8)


@pytest.mark.parametrize("c, expected", [([5, 0, 0, 0], (5, 0)), ([0, 3, 4, 0], (0, 25))])
def test_moments_from_coefficients(basis3, c, expected):
    coef = np.zeros(basis3.M)
    coef[: len(c)] = c
    assert gpc_moments(GpcExpansion(coef, basis3)) == pytest.approx(expected, abs=1e-14)


def test_project_length_mismatch(basis3):
    with pytest.raises(ValueError):
        gpc_project(np.ones(10), basis3)


def test_trajectory_projection(basis3):
    Y = np.stack([basis3.nodes[:, 0], 1 + basis3.nodes[:, 1] ** 2], axis=1)
    m, v = gpc_moments(gpc_project(Y, basis3))
    np.testing.assert_allclose(m, [0.0, 2.0], atol=1e-10)
    np.testing.assert_allclose(v, [1.0, 2.0], atol=1e-9)


@given(
    coefs=st.lists(st.floats(-2, 2), min_size=10, max_size=10),
)
@settings(max_examples=25, deadline=None)
def test_projection_reconstruction_and_parseval(coefs):
    basis = build_basis([HERMITE, LEGENDRE, HERMITE], 4, "total_degree", 2)
    truth = np.asarray(coefs)
    y = basis.Phi @ truth
    exp = gpc_project(y, basis)
    np.testing.assert_allclose(exp(basis.nodes), y, atol=1e-8)
    m, v = gpc_moments(exp)
    assert m == pytest.approx(basis.weights @ y, abs=1e-8)
    assert v == pytest.approx(basis.weights @ (y - m) ** 2, abs=1e-8)


def test_gpc_beats_mcs_on_smooth_function():
    basis = build_basis([HERMITE], 10, "full_tensor", 8)
    y = np.exp(0.1 * basis.nodes[:, 0])
    m, _ = gpc_moments(gpc_project(y, basis))
    exact = math.exp(0.005)
    assert abs(m - exact) <= 1e-6
    q = UncertainQuantity("x", 0.0, 1.0)
    mc = np.exp(0.1 * draw_samples([q], 10_000, seed=9).values[:, 0]).mean()
    assert abs(mc - exact) > abs(m - exact)


def test_scale_nodes():
    q = UncertainQuantity("J", 1.0, 0.15)
    assert scale_nodes(np.array([1.0]), q)[0] == pytest.approx(1.15)
    assert np.all(scale_nodes(np.array([-1.0, 2.0]), UncertainQuantity("c", 4.0, 0.0)) == 4.0)
    xi = {q.name: q for q in default_instance().quantities("gaussian")}["xi2_0"]
    assert scale_nodes(np.array([-math.sqrt(3)]), xi)[0] == pytest.approx(-0.03 * math.sqrt(3), abs=1e-15)
    k = {q.name: q for q in default_instance().quantities("gaussian")}["k"]
    assert scale_nodes(np.array([1.0]), k, mean=2.5)[0] == pytest.approx(2.7)


def test_grid_csv(tmp_path):
    b = build_basis([HERMITE, HERMITE], 3, "total_degree", 2)
    b.to_csv(tmp_path / "g.csv")
    data = np.loadtxt(tmp_path / "g.csv", delimiter=",", skiprows=1)
    np.testing.assert_array_equal(data[:, :2], b.nodes)
    np.testing.assert_array_equal(data[:, 2], b.weights)
