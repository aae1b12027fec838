"""Test problems with closed-form solutions and data."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial import polynomial as npoly

from .forms import BoundaryData
from .mesh import Mesh, lshape, unit_square

Z_LSHAPE = 0.544483736782464
OMEGA_LSHAPE = 1.5 * np.pi


class SingularityError(ValueError):
    """Derivatives requested at the corner singularity."""


@dataclass
class Problem:
    """Exact solution bundle.

    Callables take points of shape (n, 2) and return arrays of shape (n,),
    (n, 2) and (n, 2, 2) respectively.
    """

    name: str
    domain: str
    u: Callable
    grad: Callable
    hess: Callable
    f: Callable
    initial_mesh: Callable[[], Mesh]
    z: float | None = None
    singular_point: tuple[float, float] | None = None
    boundary: BoundaryData = field(init=False)

    def __post_init__(self):
        self.boundary = BoundaryData.from_exact(self.u, self.grad, self.hess)


# --- u1: L-shape corner singularity --------------------------------------

def _g_parts(theta, z=Z_LSHAPE, omega=OMEGA_LSHAPE):
    """Angular factor g and its first two derivatives.

    ``g = A (cos((z-1)t) - cos((z+1)t)) - S(t) B`` with
    ``A = sin((z-1)w)/(z-1) - sin((z+1)w)/(z+1)``,
    ``S(t) = sin((z-1)t)/(z-1) - sin((z+1)t)/(z+1)`` and
    ``B = cos((z-1)w) - cos((z+1)w)``.
    """
    zm, zp = z - 1, z + 1
    A = np.sin(zm * omega) / zm - np.sin(zp * omega) / zp
    B = np.cos(zm * omega) - np.cos(zp * omega)
    c_m, c_p = np.cos(zm * theta), np.cos(zp * theta)
    s_m, s_p = np.sin(zm * theta), np.sin(zp * theta)
    g = A * (c_m - c_p) - B * (s_m / zm - s_p / zp)
    g1 = A * (-zm * s_m + zp * s_p) - B * (c_m - c_p)
    g2 = A * (-zm**2 * c_m + zp**2 * c_p) - B * (-zm * s_m + zp * s_p)
    return g, g1, g2


def g_angular(theta, deriv: int = 0):
    """Angular factor of the singular solution (deriv in 0, 1, 2)."""
    return _g_parts(np.asarray(theta, dtype=float))[deriv]


def _polar(x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    r = np.hypot(x[:, 0], x[:, 1])
    theta = np.mod(np.arctan2(x[:, 1], x[:, 0]), 2 * np.pi)
    # the ray {x = 0, y < 0} belongs to theta = 3 pi / 2; the excluded quadrant never occurs
    return r, theta


def u1_eval(x, deriv: int = 0):
    """``r^(1+z) g(theta)`` and its Cartesian gradient (deriv=1) or Hessian (deriv=2)."""
    r, th = _polar(x)
    a = 1 + Z_LSHAPE
    g, dg, d2g = _g_parts(th)
    if deriv == 0:
        return r**a * g
    if np.any(r == 0):
        raise SingularityError("derivatives of u1 are singular at the corner")
    er = np.stack([np.cos(th), np.sin(th)], -1)
    et = np.stack([-np.sin(th), np.cos(th)], -1)
    if deriv == 1:
        return (r ** (a - 1))[:, None] * (a * g[:, None] * er + dg[:, None] * et)
    if deriv == 2:
        rr = np.einsum("ni,nj->nij", er, er)
        tt = np.einsum("ni,nj->nij", et, et)
        rt = np.einsum("ni,nj->nij", er, et)
        rt = rt + np.swapaxes(rt, 1, 2)
        H = ((a * (a - 1) * g)[:, None, None] * rr + (a * g + d2g)[:, None, None] * tt
             + ((a - 1) * dg)[:, None, None] * rt)
        return (r ** (a - 2))[:, None, None] * H
    raise ValueError("deriv must be 0, 1 or 2")


def lshape_singular() -> Problem:
    return Problem("lshape-singular", "lshape",
                   u=lambda x: u1_eval(x, 0), grad=lambda x: u1_eval(x, 1),
                   hess=lambda x: u1_eval(x, 2), f=lambda x: np.zeros(len(x)),
                   initial_mesh=lshape, z=Z_LSHAPE, singular_point=(0.0, 0.0))


# --- u2: smooth solution on the unit square ------------------------------

def _s(t, k):
    """k-th derivative of sin^2(pi t)."""
    pi = np.pi
    if k == 0:
        return np.sin(pi * t) ** 2
    if k == 1:
        return pi * np.sin(2 * pi * t)
    if k == 2:
        return 2 * pi**2 * np.cos(2 * pi * t)
    if k == 3:
        return -4 * pi**3 * np.sin(2 * pi * t)
    if k == 4:
        return -8 * pi**4 * np.cos(2 * pi * t)
    raise ValueError(k)


def u2_eval(x, deriv: int = 0):
    """``sin^2(pi x) sin^2(pi y)`` and its gradient (deriv=1) or Hessian (deriv=2)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    X, Y = x[:, 0], x[:, 1]
    if deriv == 0:
        return _s(X, 0) * _s(Y, 0)
    if deriv == 1:
        return np.stack([_s(X, 1) * _s(Y, 0), _s(X, 0) * _s(Y, 1)], -1)
    if deriv == 2:
        a, b, d = _s(X, 2) * _s(Y, 0), _s(X, 1) * _s(Y, 1), _s(X, 0) * _s(Y, 2)
        return np.stack([np.stack([a, b], -1), np.stack([b, d], -1)], -2)
    raise ValueError("deriv must be 0, 1 or 2")


def f2(x):
    """Bilaplacian of u2."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    X, Y = x[:, 0], x[:, 1]
    return _s(X, 4) * _s(Y, 0) + 2 * _s(X, 2) * _s(Y, 2) + _s(X, 0) * _s(Y, 4)


def square_sine() -> Problem:
    return Problem("square-sine", "square",
                   u=lambda x: u2_eval(x, 0), grad=lambda x: u2_eval(x, 1),
                   hess=lambda x: u2_eval(x, 2), f=f2, initial_mesh=unit_square)


# --- polynomial solutions (tests) ----------------------------------------

def polynomial_problem(coeffs, initial_mesh: Callable[[], Mesh] = unit_square) -> Problem:
    """Problem whose exact solution is ``sum c[i, j] x^i y^j``."""
    c = np.asarray(coeffs, dtype=float)

    def d(cc, nx, ny):
        if nx:
            cc = npoly.polyder(cc, nx, axis=0)
        if ny:
            cc = npoly.polyder(cc, ny, axis=1)
        return cc

    def ev(cc, x):
        x = np.atleast_2d(x)
        return npoly.polyval2d(x[:, 0], x[:, 1], cc)

    cxx, cxy, cyy = d(c, 2, 0), d(c, 1, 1), d(c, 0, 2)

    def hess(x):
        a, b, e = ev(cxx, x), ev(cxy, x), ev(cyy, x)
        return np.stack([np.stack([a, b], -1), np.stack([b, e], -1)], -2)

    def f(x):
        return ev(d(c, 4, 0), x) + 2 * ev(d(c, 2, 2), x) + ev(d(c, 0, 4), x)

    return Problem("polynomial", "custom", u=lambda x: ev(c, x),
                   grad=lambda x: np.stack([ev(d(c, 1, 0), x), ev(d(c, 0, 1), x)], -1),
                   hess=hess, f=f, initial_mesh=initial_mesh)


def random_polynomial(degree: int, rng: np.random.Generator) -> np.ndarray:
    """Random coefficient array of total degree ``degree``."""
    c = np.zeros((degree + 1, degree + 1))
    for i in range(degree + 1):
        for j in range(degree + 1 - i):
            c[i, j] = rng.normal()
    return c


PROBLEMS = {"lshape-singular": lshape_singular, "square-sine": square_sine}


def get_problem(tag: str) -> Problem:
    try:
        return PROBLEMS[tag]()
    except KeyError:
        raise ValueError(f"unknown problem {tag!r}; choose from {sorted(PROBLEMS)}") from None
