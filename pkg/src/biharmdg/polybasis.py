"""Polynomial bases on the reference triangle and quadrature rules.

The reference triangle is ``{(x, y): x >= 0, y >= 0, x + y <= 1}`` with
vertices ``(0, 0), (1, 0), (0, 1)``.

Basis functions are evaluated together with all their partial derivatives
up to total order three by propagating truncated Taylor jets through the
three-term recurrences that define them.  This keeps the orthonormal
(Dubiner) basis well conditioned up to high degree, which matters for the
p-refinement study (p up to 20).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import comb, factorial

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

# Multi-indices of the derivatives stored in a jet, ordered by total order.
MULTI_INDICES: tuple[tuple[int, int], ...] = (
    (0, 0),
    (1, 0), (0, 1),
    (2, 0), (1, 1), (0, 2),
    (3, 0), (2, 1), (1, 2), (0, 3),
)
_INDEX = {a: k for k, a in enumerate(MULTI_INDICES)}
NJET = len(MULTI_INDICES)
MAX_DERIV = 3
MAX_QUAD_DEGREE = 200


def _leibniz_terms():
    terms = []
    for k, (a1, a2) in enumerate(MULTI_INDICES):
        for b1 in range(a1 + 1):
            for b2 in range(a2 + 1):
                c = comb(a1, b1) * comb(a2, b2)
                terms.append((k, _INDEX[(b1, b2)], _INDEX[(a1 - b1, a2 - b2)], float(c)))
    return terms


_LEIBNIZ = _leibniz_terms()


class Jet:
    """Values and partial derivatives (total order <= 3) of a bivariate function.

    ``data[k]`` holds the derivative with multi-index ``MULTI_INDICES[k]`` at
    every evaluation point.
    """

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        self.data = data

    @classmethod
    def constant(cls, c: float, npts: int, dtype=float) -> "Jet":
        d = np.zeros((NJET, npts), dtype=dtype)
        d[0] = c
        return cls(d)

    @classmethod
    def linear(cls, c0: float, cx: float, cy: float, x: np.ndarray, y: np.ndarray) -> "Jet":
        d = np.zeros((NJET, x.size), dtype=x.dtype)
        d[0] = c0 + cx * x + cy * y
        d[1] = cx
        d[2] = cy
        return cls(d)

    def __add__(self, other):
        if isinstance(other, Jet):
            return Jet(self.data + other.data)
        d = self.data.copy()
        d[0] += other
        return Jet(d)

    def __sub__(self, other):
        if isinstance(other, Jet):
            return Jet(self.data - other.data)
        d = self.data.copy()
        d[0] -= other
        return Jet(d)

    def __mul__(self, other):
        if not isinstance(other, Jet):
            return Jet(self.data * other)
        out = np.zeros_like(self.data)
        a, b = self.data, other.data
        for k, i, j, c in _LEIBNIZ:
            out[k] += c * a[i] * b[j]
        return Jet(out)

    __rmul__ = __mul__


@dataclass(frozen=True)
class BasisTable:
    """Reference-coordinate basis tables at a set of points.

    Shapes: ``values`` (npts, nb), ``grad`` (npts, nb, 2), ``hess``
    (npts, nb, 2, 2), ``d3`` (npts, nb, 2, 2, 2).  Entries beyond the
    requested derivative order are ``None``.
    """

    degree: int
    values: np.ndarray
    grad: np.ndarray | None = None
    hess: np.ndarray | None = None
    d3: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def dimension(p: int) -> int:
    """Dimension of P_p on a triangle."""
    return (p + 1) * (p + 2) // 2


def _homogenized_legendre(p, a: Jet, b2: Jet) -> list[Jet]:
    # Q_i = b^i P_i(a / b), polynomial in (a, b^2).
    q = [Jet.constant(1.0, a.data.shape[1], a.data.dtype)]
    if p >= 1:
        q.append(a * 1.0)
    for i in range(1, p):
        q.append(a * q[i] * ((2 * i + 1) / (i + 1)) - b2 * q[i - 1] * (i / (i + 1)))
    return q


def _jacobi(n: int, alpha: float, t: Jet) -> list[Jet]:
    """Jacobi polynomials P_k^{(alpha, 0)}(t) for k <= n."""
    out = [Jet.constant(1.0, t.data.shape[1], t.data.dtype)]
    if n >= 1:
        out.append(t * ((alpha + 2) / 2) + alpha / 2)
    for k in range(2, n + 1):
        s = 2 * k + alpha
        c0 = 2 * k * (k + alpha) * (s - 2)
        c1 = (s - 1) * s * (s - 2)
        c2 = (s - 1) * alpha * alpha
        c3 = 2 * (k + alpha - 1) * (k - 1) * s
        out.append((t * c1 * out[k - 1] + out[k - 1] * c2 - out[k - 2] * c3) * (1.0 / c0))
    return out


def dubiner_indices(p: int) -> list[tuple[int, int]]:
    """Hierarchical ordering: by total degree, then by the y-index."""
    return [(k - j, j) for k in range(p + 1) for j in range(k + 1)]


def _dubiner_norm2(i: int, j: int) -> float:
    # Integral over the reference triangle of the squared Dubiner function.
    return 1.0 / ((2 * i + 1) * (2 * i + 2 * j + 2))


def _orthonormal_jets(p: int, x: np.ndarray, y: np.ndarray) -> list[Jet]:
    a = Jet.linear(-1.0, 2.0, 1.0, x, y)
    b = Jet.linear(1.0, 0.0, -1.0, x, y)
    t = Jet.linear(-1.0, 0.0, 2.0, x, y)
    q = _homogenized_legendre(p, a, b * b)
    jac = {}
    out = []
    for i, j in dubiner_indices(p):
        if i not in jac:
            jac[i] = _jacobi(p - i, 2 * i + 1.0, t)
        out.append(q[i] * jac[i][j] * (1.0 / np.sqrt(_dubiner_norm2(i, j))))
    return out


def _monomial_jets(p: int, x: np.ndarray, y: np.ndarray) -> list[Jet]:
    out = []
    for a, b in dubiner_indices(p):
        d = np.zeros((NJET, x.size), dtype=x.dtype)
        for k, (d1, d2) in enumerate(MULTI_INDICES):
            if d1 <= a and d2 <= b:
                c = factorial(a) // factorial(a - d1) * factorial(b) // factorial(b - d2)
                d[k] = c * x ** (a - d1) * y ** (b - d2)
        out.append(Jet(d))
    return out


def lagrange_nodes(p: int) -> np.ndarray:
    """Equispaced nodes of degree p: vertices, then edge interiors, then interior.

    Edge nodes are listed per local edge k (opposite vertex k), running from
    the lower to the higher local vertex index of that edge.
    """
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    nodes = [verts[0], verts[1], verts[2]]
    for k in range(3):
        a, b = sorted(set(range(3)) - {k})
        for m in range(1, p):
            nodes.append(verts[a] + (verts[b] - verts[a]) * m / p)
    for j in range(1, p):
        for i in range(1, p - j):
            nodes.append(np.array([i / p, j / p]))
    return np.array(nodes).reshape(-1, 2)


@lru_cache(maxsize=None)
def _lagrange_coefficients(p: int) -> np.ndarray:
    nodes = lagrange_nodes(p)
    vander = np.array([j.data[0] for j in _orthonormal_jets(p, nodes[:, 0], nodes[:, 1])]).T
    return np.linalg.inv(vander)


def _jets_to_table(p: int, jets: list[Jet], max_deriv: int, coeffs=None) -> BasisTable:
    data = np.stack([j.data for j in jets], axis=-1)  # (NJET, npts, nb)
    if coeffs is not None:
        data = data @ coeffs
    npts, nb = data.shape[1], data.shape[2]
    values = data[0]
    grad = hess = d3 = None
    if max_deriv >= 1:
        grad = np.stack([data[1], data[2]], axis=-1)
    if max_deriv >= 2:
        hess = np.empty((npts, nb, 2, 2), dtype=data.dtype)
        for i in range(2):
            for j in range(2):
                hess[..., i, j] = data[_INDEX[(2 - i - j, i + j)]]
    if max_deriv >= 3:
        d3 = np.empty((npts, nb, 2, 2, 2), dtype=data.dtype)
        for i in range(2):
            for j in range(2):
                for k in range(2):
                    ny = i + j + k
                    d3[..., i, j, k] = data[_INDEX[(3 - ny, ny)]]
    return BasisTable(p, values, grad, hess, d3)


def eval_basis(p: int, points, max_deriv: int = 2, kind: str = "orthonormal",
               dtype=float) -> BasisTable:
    """Evaluate a degree-p basis and its derivatives at reference points.

    Parameters
    ----------
    p : int
        Polynomial degree (>= 0).
    points : array_like, shape (npts, 2)
        Points in reference coordinates.
    max_deriv : int
        Highest derivative order to tabulate (<= 3).
    kind : {"orthonormal", "monomial", "lagrange"}
        ``orthonormal`` is the hierarchical L2-orthonormal Dubiner basis,
        ``monomial`` is ``x**a * y**b`` in the same (total degree) order and
        ``lagrange`` is the nodal basis on :func:`lagrange_nodes`.
    dtype : numpy floating type
        Working precision, e.g. ``np.longdouble`` for extended precision.
    """
    if max_deriv > MAX_DERIV:
        raise ValueError(f"derivatives of order {max_deriv} > {MAX_DERIV} are unsupported")
    if p < 0:
        raise ValueError("degree must be non-negative")
    pts = np.atleast_2d(np.asarray(points, dtype=dtype))
    x, y = pts[:, 0], pts[:, 1]
    if kind == "orthonormal":
        return _jets_to_table(p, _orthonormal_jets(p, x, y), max_deriv)
    if kind == "monomial":
        return _jets_to_table(p, _monomial_jets(p, x, y), max_deriv)
    if kind == "lagrange":
        return _jets_to_table(p, _orthonormal_jets(p, x, y), max_deriv, _lagrange_coefficients(p))
    raise ValueError(f"unknown basis kind {kind!r}")


@dataclass(frozen=True)
class QuadRule:
    points: np.ndarray
    weights: np.ndarray
    degree: int


def _check_degree(degree: int) -> int:
    if degree < 0:
        raise ValueError("quadrature degree must be non-negative")
    if degree > MAX_QUAD_DEGREE:
        raise ValueError(f"quadrature degree {degree} beyond implemented family (<= {MAX_QUAD_DEGREE})")
    return degree // 2 + 1


@lru_cache(maxsize=None)
def quad_edge(degree: int) -> QuadRule:
    """Gauss-Legendre rule on [0, 1] exact up to ``degree``."""
    n = _check_degree(degree)
    s, w = roots_legendre(n)
    return QuadRule((s + 1) / 2, w / 2, degree)


@lru_cache(maxsize=None)
def quad_triangle(degree: int) -> QuadRule:
    """Collapsed Gauss-Jacobi rule on the reference triangle exact up to ``degree``."""
    n = _check_degree(degree)
    s, ws = roots_legendre(n)
    t, wt = roots_jacobi(n, 1.0, 0.0)
    y = (1 + t) / 2
    x = np.outer(1 - y, (1 + s) / 2)
    pts = np.column_stack([x.ravel(), np.repeat(y, n)])
    w = np.outer(wt, ws).ravel() / 8
    return QuadRule(pts, w, degree)
