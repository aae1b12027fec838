import numpy as np
import pytest
import scipy.sparse as sp

from biharmdg.forms import BoundaryData, assemble_system
from biharmdg.linalg import IndefiniteError, SolverError, SparseSym, solve
from biharmdg.mesh import lshape, uniform_bisect, unit_square
from biharmdg.problems import square_sine


def sym(M):
    return SparseSym(sp.csr_matrix(np.asarray(M, dtype=float)))


def test_identity():
    b = np.array([1.0, -2.0, 3.5])
    np.testing.assert_array_equal(solve(sym(np.eye(3)), b), b)


def test_two_by_two():
    np.testing.assert_allclose(solve(sym([[2, 1], [1, 2]]), np.array([3.0, 3.0])), [1, 1])


def test_zero_rhs():
    np.testing.assert_array_equal(solve(sym([[2, 1], [1, 2]]), np.zeros(2)), 0)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        solve(sym(np.eye(2)), np.ones(3))


def test_indefinite_reports_pivot():
    with pytest.raises(IndefiniteError) as exc:
        solve(sym([[1, 2], [2, 1]]), np.array([1.0, 0.0]))
    assert exc.value.pivot in (0, 1)
    assert exc.value.value <= 0


def test_from_upper_is_exactly_symmetric():
    rng = np.random.default_rng(0)
    r = rng.integers(0, 20, 300)
    c = rng.integers(0, 20, 300)
    A = SparseSym.from_upper(np.concatenate([r, c]), np.concatenate([c, r]),
                             np.tile(rng.normal(size=300), 2), 20)
    assert A.asymmetry() == 0.0


@pytest.fixture(scope="module")
def ipdg_square():
    prob = square_sine()
    return assemble_system(unit_square(), 2, None, prob.f, prob.boundary)


def test_ipdg_square_residual(ipdg_square):
    A, b = ipdg_square
    x = solve(A, b, block=6)
    b64 = np.asarray(b, dtype=float)
    assert np.linalg.norm(A @ x - b64) <= 1e-10 * np.linalg.norm(b64)
    assert b64 @ x > 0


def test_determinism():
    mesh = uniform_bisect(lshape())
    A, _ = assemble_system(mesh, 3, None, None, BoundaryData.homogeneous())
    b = np.random.default_rng(2).normal(size=A.n)
    x1 = solve(A, b, block=10)
    x2 = solve(A, b, block=10)
    assert np.array_equal(x1, x2)
    assert b @ x1 > 0


def test_cg_fallback_agrees_with_direct():
    mesh = uniform_bisect(lshape())
    A, _ = assemble_system(mesh, 2, None, None, BoundaryData.homogeneous())
    b = np.random.default_rng(3).normal(size=A.n)
    xd = solve(A, b, block=6)
    xc = solve(A, b, block=6, max_direct=0)
    assert np.linalg.norm(xd - xc) <= 1e-7 * np.linalg.norm(xd)


def test_unreachable_tolerance_raises():
    from scipy.linalg import hilbert
    with pytest.raises(SolverError, match="backward error"):
        solve(sym(hilbert(12)), np.ones(12), tol=1e-30)
