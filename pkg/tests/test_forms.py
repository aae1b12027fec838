import numpy as np
import pytest

from biharmdg.analysis import dg_error, discrete_solve
from biharmdg.forms import (BoundaryData, Lifting, PenaltyConfig, LagrangeSpace, apply_bilinear,
                            assemble_system, broken_hessian, dg_norm, element_bubble,
                            facet_jumps, galerkin_bubble_residual, generalized_hessian,
                            gh_orthogonality, lifting, symcurl_lagrange, tensor_curl,
                            tensor_divdiv, _l2_inner_tensor)
from biharmdg.mesh import lshape, refine_nvb, uniform_bisect, unit_square
from biharmdg.polybasis import quad_edge, quad_triangle
from biharmdg.problems import lshape_singular, polynomial_problem, random_polynomial, square_sine
from biharmdg.space import DGField, DGSpace
from biharmdg import verify


def project(space, fn):
    x = space.quad_points()
    vals = np.asarray(fn(x.reshape(-1, 2))).reshape(x.shape[:2])
    t, w = space.vtable.values, space.vquad.weights
    return DGField(space, np.einsum("km,q,qm,eq->ek", space.ref_mass_inv, w, t, vals))


@pytest.fixture
def mixed_mesh():
    return refine_nvb(refine_nvb(lshape(), [0, 3]), [1])


def test_penalty_defaults_and_validation():
    pen = PenaltyConfig.default(3)
    assert (pen.c_sigma, pen.c_tau) == (3 * 3**6, 9 * 9)
    with pytest.raises(ValueError):
        PenaltyConfig(-1.0, 1.0, 2)
    with pytest.raises(ValueError):
        PenaltyConfig(1.0, 1.0, 1)


def test_system_dimension_and_exact_symmetry():
    A, b = assemble_system(unit_square(), 2, None, None, BoundaryData.homogeneous())
    assert A.n == 12 and b.shape == (12,)
    M = A.matrix
    assert abs(M - M.T).max() == 0.0


def test_degree_below_two_rejected():
    with pytest.raises(ValueError):
        assemble_system(unit_square(), 1, None, None, BoundaryData.homogeneous())


@pytest.mark.parametrize("p", [2, 3, 5])
def test_polynomial_reproduction(p, mixed_mesh):
    prob = polynomial_problem(random_polynomial(p, np.random.default_rng(p)), lshape)
    sol = discrete_solve(prob, mixed_mesh, p)
    scale = dg_norm(project(sol.space, prob.u))
    assert dg_error(prob.hess, sol.u_h, prob.boundary) <= 1e-8 * scale


def test_boundary_data_tangential_derivative_matches_fd():
    prob = square_sine()
    m = unit_square()
    b = np.flatnonzero(m.boundary_facets)
    nu, tau = m.facet_normal[b], m.facet_tangent[b]
    x = m.vertices[m.facets[b, 0]] + 0.37 * (m.vertices[m.facets[b, 1]] - m.vertices[m.facets[b, 0]])
    h = 1e-6
    fd = (prob.boundary.g1(x + h * tau, nu, tau) - prob.boundary.g1(x - h * tau, nu, tau)) / (2 * h)
    ex = prob.boundary.dtau_g1(x, nu, tau)
    np.testing.assert_allclose(ex, fd, atol=1e-6 * max(1.0, np.abs(ex).max()))
    pr = lshape_singular()
    L = lshape()
    b = np.flatnonzero(L.boundary_facets)
    nu, tau = L.facet_normal[b], L.facet_tangent[b]
    x = L.vertices[L.facets[b, 0]] + 0.61 * (L.vertices[L.facets[b, 1]] - L.vertices[L.facets[b, 0]])
    fd = (pr.boundary.g1(x + h * tau, nu, tau) - pr.boundary.g1(x - h * tau, nu, tau)) / (2 * h)
    ex = pr.boundary.dtau_g1(x, nu, tau)
    np.testing.assert_allclose(ex, fd, rtol=1e-6, atol=1e-6 * np.abs(ex).max())


def test_lifting_vanishes_on_global_polynomial(mixed_mesh):
    res = verify.check_lifting_vanishing()
    assert res.passed, res.line()


def _monomials(p):
    return [(a, b) for a in range(p + 1) for b in range(p + 1 - a)]


def test_lifting_against_dense_oracle():
    """v = 1 on element 0 of the two-triangle square; oracle in physical monomials."""
    mesh, p = unit_square(), 2
    space = DGSpace(mesh, p)
    coef = np.zeros((2, space.nb))
    coef[0] = project(DGSpace(mesh, p), lambda x: np.ones(len(x))).coef[0]
    v = DGField(space, coef)
    L = lifting(mesh, p, v)

    mono = _monomials(p)
    q = quad_triangle(2 * p + 2)
    e = quad_edge(2 * p + 2)

    def mono_eval(x, order):
        out = []
        for a, b in mono:
            if order == 0:
                out.append(x[:, 0]**a * x[:, 1]**b)
            else:
                gx = a * x[:, 0]**max(a - 1, 0) * x[:, 1]**b if a else 0 * x[:, 0]
                gy = b * x[:, 0]**a * x[:, 1]**max(b - 1, 0) if b else 0 * x[:, 0]
                out.append(np.stack([gx, gy], -1))
        return np.stack(out, 1)

    # unknowns: element, monomial, i, j
    nm = len(mono)
    n = 2 * nm * 4
    M = np.zeros((n, n))
    rhs = np.zeros(n)

    def idx(el, k, i, j):
        return ((el * nm + k) * 2 + i) * 2 + j

    for el in range(2):
        V = mesh.vertices[mesh.triangles[el]]
        J = np.column_stack([V[1] - V[0], V[2] - V[0]])
        x = V[0] + q.points @ J.T
        w = q.weights * abs(np.linalg.det(J))
        phi = mono_eval(x, 0)
        G = (phi * w[:, None]).T @ phi
        for i in range(2):
            for j in range(2):
                for k in range(nm):
                    for l in range(nm):
                        M[idx(el, k, i, j), idx(el, l, i, j)] = G[k, l]

    vals = {0: 1.0, 1: 0.0}
    for f in range(mesh.n_facets):
        e0, e1 = mesh.facet_elements[f]
        a, b = mesh.vertices[mesh.facets[f]]
        x = a + np.outer(e.points, b - a)
        w = e.weights * np.linalg.norm(b - a)
        nu = mesh.facet_normal[f]
        jump = vals[e0] - (vals[e1] if e1 >= 0 else 0.0)
        sides = [e0] + ([e1] if e1 >= 0 else [])
        avg = 0.5 if e1 >= 0 else 1.0
        for el in sides:
            g = mono_eval(x, 1)  # (nq, nm, 2)
            for k in range(nm):
                for i in range(2):
                    for j in range(2):
                        # B = m_k E_ij: nu^T div B = nu_i d_j m_k
                        rhs[idx(el, k, i, j)] += avg * jump * np.sum(w * nu[i] * g[:, k, j])
    sol = np.linalg.solve(M, rhs).reshape(2, nm, 2, 2)
    pts = np.array([[0.2, 0.3], [0.5, 0.1], [0.25, 0.25]])
    got = L.eval_at([0, 1], pts, 0)[0]
    for el in range(2):
        x = mesh.to_physical(pts, [el])[0]
        ref = np.einsum("qk,kij->qij", mono_eval(x, 0), sol[el])
        np.testing.assert_allclose(got[el], ref, atol=1e-11)
    assert np.abs(L.coef[0]).max() > 1e-3


def test_lifting_matrix_matches_matrix_free(mixed_mesh):
    space = DGSpace(mixed_mesh, 3)
    op = Lifting(space)
    v = DGField(space, np.random.default_rng(1).normal(size=(mixed_mesh.n_elements, space.nb)))
    np.testing.assert_allclose((op.matrix @ v.vector()).reshape(op(v).coef.shape), op(v).coef,
                               atol=1e-12 * np.abs(op(v).coef).max())


def test_lifting_stability_constant():
    rng = np.random.default_rng(7)
    consts = []
    for m in (lshape(), uniform_bisect(lshape())):
        space = DGSpace(m, 2)
        op = Lifting(space)
        F = np.arange(m.n_facets)
        h = m.facet_h[:, None]
        c = 0.0
        for _ in range(100):
            v = DGField(space, rng.normal(size=(m.n_elements, space.nb)))
            jv, jg = facet_jumps(v, F)
            W = space.facet_weights(F)
            den = np.sqrt(np.sum(W * h**-3 * jv**2)) + np.sqrt(np.sum(W * h**-1 * (jg**2).sum(-1)))
            Lv = op(v)
            c = max(c, np.sqrt(_l2_inner_tensor(Lv, Lv)) / den)
        consts.append(c)
    assert all(np.isfinite(consts))
    # no growth under refinement
    assert consts[1] <= 1.1 * consts[0]


def test_generalized_hessian_of_smooth_field_is_broken_hessian(mixed_mesh):
    prob = polynomial_problem(random_polynomial(4, np.random.default_rng(3)), lshape)
    space = DGSpace(mixed_mesh, 4)
    u = project(space, prob.u)
    H = generalized_hessian(u, prob.boundary)
    np.testing.assert_allclose(H.coef, broken_hessian(u).coef, atol=1e-10)


def test_gh_orthogonality_vertex_continuous():
    res = verify.check_gh_orthogonality()
    assert res.passed, res.line()


def test_gh_orthogonality_dense_nullspace():
    """Direct check against vector fields whose gradient is continuous at vertices."""
    from biharmdg.forms import vertex_gradient_constraints, _symcurl_functional
    import scipy.linalg as sla
    prob = square_sine()
    mesh = uniform_bisect(unit_square())
    sol = discrete_solve(prob, mesh, 2)
    lag = LagrangeSpace(mesh, 2)
    C = vertex_gradient_constraints(mesh, lag).toarray()
    Z = sla.null_space(C)
    r, nrm = _symcurl_functional(sol.H, 2, prob.boundary, lag)
    proj = Z.T @ r.reshape(-1)
    Hn = np.sqrt(_l2_inner_tensor(sol.H, sol.H))
    assert np.abs(proj).max() <= 1e-8 * Hn * nrm.max()
    assert Z.shape[1] > 0


def test_gh_bubbles():
    res = verify.check_gh_bubbles()
    assert res.passed, res.line()


def test_element_bubble_has_no_jumps():
    space = DGSpace(lshape(), 7)
    w = element_bubble(space, 2, lambda x: 1 + x[:, 0])
    jv, jg = facet_jumps(w, np.arange(space.mesh.n_facets))
    assert np.abs(jv).max() < 1e-13 and np.abs(jg).max() < 1e-12
    assert np.abs(Lifting(space)(w).coef).max() < 1e-11
    prob = square_sine()
    sol = discrete_solve(prob, uniform_bisect(unit_square()), 6)
    w = element_bubble(sol.space, 1, lambda x: np.ones(len(x)))
    assert galerkin_bubble_residual(sol.H, prob.f, w) < 1e-8


def test_form_equivalence_and_symmetry(mixed_mesh):
    res = verify.check_form_equivalence()
    assert res.passed, res.line()
    space = DGSpace(mixed_mesh, 2)
    rng = np.random.default_rng(5)
    pen = PenaltyConfig.default(2)
    u = DGField(space, rng.normal(size=(mixed_mesh.n_elements, space.nb)))
    v = DGField(space, rng.normal(size=(mixed_mesh.n_elements, space.nb)))
    assert apply_bilinear(u, v, pen) == apply_bilinear(v, u, pen)


def test_apply_bilinear_mesh_mismatch():
    a = DGField(DGSpace(lshape(), 2), np.zeros((6, 6)))
    b = DGField(DGSpace(unit_square(), 2), np.zeros((2, 6)))
    with pytest.raises(ValueError):
        apply_bilinear(a, b, PenaltyConfig.default(2))


def test_coercivity_and_its_loss():
    ok = verify.check_coercivity()
    assert ok.passed, ok.line()
    bad = verify.check_coercivity(PenaltyConfig(0.0, 0.0, 2))
    assert not bad.passed


def _theta_nodes(lag, fn):
    return lag.interpolate(fn)


def test_symcurl_of_linear_field():
    mesh = lshape()
    lag = LagrangeSpace(mesh, 2)
    S = symcurl_lagrange(mesh, 2, _theta_nodes(lag, lambda x: np.stack([x[:, 1], 0 * x[:, 0]], -1)), lag)
    vals = S.eval_volume(0)[0]
    # curl (y, 0) has rows (1, 0) and (0, 0); symmetric part is E_11
    np.testing.assert_allclose(vals, np.broadcast_to([[1, 0], [0, 0]], vals.shape), atol=1e-13)
    assert np.abs(tensor_divdiv(S)).max() < 1e-12


@pytest.mark.parametrize("fn", [lambda x: np.stack([1 + 0 * x[:, 0], 0 * x[:, 0]], -1),
                                lambda x: np.stack([0 * x[:, 0], 1 + 0 * x[:, 0]], -1),
                                lambda x: x.copy()])
def test_symcurl_kills_rt0(fn):
    mesh = uniform_bisect(lshape())
    lag = LagrangeSpace(mesh, 3)
    S = symcurl_lagrange(mesh, 3, lag.interpolate(fn), lag)
    assert np.abs(S.coef).max() < 1e-12


def test_symcurl_rejects_bad_coefficients():
    with pytest.raises(ValueError):
        symcurl_lagrange(lshape(), 2, np.zeros((3, 2)))


def test_complex_identities():
    res = verify.check_complex()
    assert res.passed, res.line()


def test_curl_of_broken_hessian_vanishes(mixed_mesh):
    space = DGSpace(mixed_mesh, 5)
    v = DGField(space, np.random.default_rng(11).normal(size=(mixed_mesh.n_elements, space.nb)))
    D = broken_hessian(v)
    c = tensor_curl(D)
    assert np.abs(c).max() <= 1e-12 * np.abs(D.eval_volume(1)[1]).max()


def test_green_identity():
    res = verify.check_green_identity()
    assert res.passed, res.line()
