from math import factorial

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from biharmdg.polybasis import dimension, eval_basis, quad_edge, quad_triangle
from biharmdg.space import DGSpace, push_forward
from biharmdg.mesh import build_mesh


def test_dimension():
    assert [dimension(p) for p in range(5)] == [1, 3, 6, 10, 15]
    assert eval_basis(4, [[0.2, 0.3]]).dim == 15


def test_p1_lagrange_at_barycenter():
    t = eval_basis(1, [[1 / 3, 1 / 3]], 2, kind="lagrange")
    np.testing.assert_allclose(t.values[0], 1 / 3, atol=1e-15)
    np.testing.assert_allclose(t.hess, 0, atol=1e-13)


def test_monomial_third_derivative():
    t = eval_basis(3, [[0.1, 0.7]], 3, kind="monomial")
    # x^3 is the first degree-3 entry in total degree order (x^3, x^2 y, ...)
    k = [np.allclose(t.values[:, j], 0.1**3) for j in range(10)].index(True)
    assert t.d3[0, k, 0, 0, 0] == pytest.approx(6.0)


def test_max_deriv_limit():
    with pytest.raises(ValueError):
        eval_basis(2, [[0.1, 0.1]], 4)


def test_edge_rule():
    q = quad_edge(2)
    assert np.sum(q.weights * q.points**2) == pytest.approx(1 / 3, abs=1e-15)
    assert q.weights.sum() == pytest.approx(1.0, abs=1e-14)


@pytest.mark.parametrize("deg", [0, 4, 11, 24, 44])
def test_triangle_rule_monomials(deg):
    q = quad_triangle(deg)
    assert q.weights.sum() == pytest.approx(0.5, abs=1e-14)
    x, y = q.points.T
    for a in range(deg + 1):
        for b in range(deg + 1 - a):
            exact = factorial(a) * factorial(b) / factorial(a + b + 2)
            assert np.sum(q.weights * x**a * y**b) == pytest.approx(exact, rel=1e-12)


def test_quadrature_degree_limit():
    with pytest.raises(ValueError):
        quad_triangle(-1)
    with pytest.raises(ValueError):
        quad_edge(10_000)


@pytest.mark.parametrize("p", [2, 10, 20])
def test_orthonormal_gram_identity(p):
    q = quad_triangle(2 * p)
    t = eval_basis(p, q.points, 0)
    G = (t.values * q.weights[:, None]).T @ t.values
    np.testing.assert_allclose(G, np.eye(dimension(p)), atol=1e-11)
    assert np.linalg.cond(G) < 1 + 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 6), st.floats(0.05, 0.45), st.floats(0.05, 0.45), st.integers(0, 2**31))
def test_derivatives_match_finite_differences(p, x, y, seed):
    c = np.random.default_rng(seed).normal(size=dimension(p))
    h = 1e-5

    def val(pts, order):
        t = eval_basis(p, pts, 3)
        return np.einsum("n...,n->...", [t.values, t.grad, t.hess, t.d3][order][0], c)

    pt = np.array([[x, y]])
    for order in range(1, 4):
        exact = val(pt, order)
        fd = np.stack([(val(pt + h * e, order - 1) - val(pt - h * e, order - 1)) / (2 * h)
                       for e in np.eye(2)], axis=-1)
        scale = max(np.abs(exact).max(), 1.0)
        assert np.abs(exact - fd).max() <= 1e-6 * scale


def test_push_forward_gradient():
    V = np.array([[0.3, -0.2], [1.7, 0.4], [0.1, 1.1]])
    m = build_mesh(V, [[0, 1, 2]], init_refinement_edge=False)
    J = m.jacobian[0]
    ref = np.array([[0.2, 0.3], [0.6, 0.1]])
    t = eval_basis(2, ref, 1, kind="monomial")
    g = push_forward(t, m.inv_jacobian[0], 1)[1]
    expected = np.einsum("ij,qnj->qni", np.linalg.inv(J).T, t.grad)
    np.testing.assert_allclose(g, expected, atol=1e-14)


def test_space_rejects_low_quadrature():
    m = build_mesh([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]])
    with pytest.raises(ValueError):
        DGSpace(m, 3, quad_degree=4)
