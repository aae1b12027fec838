"""Invariant checks shared by the ``verify`` command and the test-suite.

Every check returns a :class:`CheckResult` carrying the measured value, the
tolerance it was compared against and the verdict.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .analysis import dg_error, discrete_solve
from .estimators import comparison_constant, eta, gimel
from .forms import (BoundaryData, Lifting, PenaltyConfig, LagrangeSpace, apply_bilinear,
                    assemble_system, broken_hessian, dg_norm, element_bubble,
                    galerkin_bubble_residual, gh_orthogonality, green_identity_residual,
                    lifting, symcurl_lagrange, tensor_curl, tensor_divdiv)
from .linalg import IndefiniteError, solve
from .mesh import Mesh, lshape, refine_nvb, uniform_bisect, unit_square
from .problems import lshape_singular, polynomial_problem, random_polynomial, square_sine
from .space import DGField, DGSpace

SEED = 20240611
# tolerances of the acceptance suite
TOL_LIFTING = 1e-12
TOL_FORMS = 1e-10
TOL_GH = 1e-8
TOL_GREEN = 1e-12
TOL_COMPLEX = 1e-12
TOL_REPRODUCTION = 1e-8
# ceiling for the patchwise comparison constant
COMPARISON_BOUND = 10.0
# smallest accepted eigenvalue of A relative to its largest one
COERCIVITY_FLOOR = 1e-12


@dataclass
class CheckResult:
    """Outcome of one invariant check."""

    name: str
    value: float
    tol: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        text = f"{verdict} {self.name}: value={self.value:.3e} tol={self.tol:.1e}"
        return f"{text} ({self.detail})" if self.detail else text


def _below(name: str, value: float, tol: float, detail: str = "") -> CheckResult:
    return CheckResult(name, float(value), tol, bool(value <= tol), detail)


def _test_mesh() -> Mesh:
    """Small non-uniform L-shape mesh mixing refinement levels."""
    m = lshape()
    m = refine_nvb(m, [0, 3])
    return refine_nvb(m, [1])


def random_field(space: DGSpace, rng: np.random.Generator) -> DGField:
    return DGField(space, rng.normal(size=(space.mesh.n_elements, space.nb)))


# --- individual checks -------------------------------------------------------

def check_lifting_vanishing(p: int = 3, seed: int = SEED) -> CheckResult:
    """``L_h(v) = 0`` for a global polynomial with data taken from it."""
    rng = np.random.default_rng(seed)
    mesh = _test_mesh()
    space = DGSpace(mesh, p)
    prob = polynomial_problem(random_polynomial(p, rng), lshape)
    v = _interpolate(space, prob.u)
    L = lifting(mesh, p, v, prob.boundary)
    return _below("lifting vanishing", np.abs(L.coef).max(), TOL_LIFTING,
                  f"p={p}, {mesh.n_elements} elements")


def _interpolate(space: DGSpace, fn) -> DGField:
    """Element-wise L2 projection (exact for polynomials of degree <= p)."""
    x = space.quad_points()
    vals = np.asarray(fn(x.reshape(-1, 2))).reshape(x.shape[:2])
    t, w = space.vtable.values, space.vquad.weights
    return DGField(space, np.einsum("km,q,qm,eq->ek", space.ref_mass_inv, w, t, vals))


def check_form_equivalence(p: int = 3, pairs: int = 50, seed: int = SEED) -> CheckResult:
    """Facet-average writing (assembled matrix) against the lifting writing."""
    rng = np.random.default_rng(seed)
    mesh = _test_mesh()
    space = DGSpace(mesh, p)
    pen = PenaltyConfig.default(p)
    A, _ = assemble_system(mesh, p, pen, None, BoundaryData.homogeneous(), space)
    op = Lifting(space)
    worst = 0.0
    for _ in range(pairs):
        u, v = random_field(space, rng), random_field(space, rng)
        a = float(u.vector() @ (A @ v.vector()))
        b = apply_bilinear(u, v, pen, op)
        worst = max(worst, abs(a - b) / (dg_norm(u) * dg_norm(v)))
    return _below("bilinear form equivalence", worst, TOL_FORMS, f"{pairs} random pairs")


def solved_problems() -> list[tuple[str, object, Mesh, int]]:
    """Small solved configurations used by the orthogonality check."""
    rng = np.random.default_rng(SEED)
    out = []
    for p in (2, 3):
        out.append((f"square-sine p={p}", square_sine(), uniform_bisect(unit_square()), p))
    for p in (2, 4):
        out.append((f"lshape-singular p={p}", lshape_singular(), _test_mesh(), p))
    out.append(("polynomial p=3", polynomial_problem(random_polynomial(3, rng), lshape),
                _test_mesh(), 3))
    return out


def check_gh_orthogonality(full_space: bool = False) -> CheckResult:
    """Orthogonality of ``H_h(u_h)`` to ``sym curl`` of vector Lagrange fields.

    By default the test fields are those with vertex-continuous gradients;
    ``full_space=True`` uses the whole vector Lagrange space.
    """
    worst, where = 0.0, ""
    for name, prob, mesh, p in solved_problems():
        sol = discrete_solve(prob, mesh, p)
        rep = gh_orthogonality(sol.u_h, sol.H, prob.boundary)
        val = rep.full if full_space else rep.vertex_continuous
        if val >= worst:
            worst, where = val, name
    label = "full Lagrange space" if full_space else "vertex-continuous gradients"
    return _below(f"generalized Hessian orthogonality ({label})", worst, TOL_GH,
                  f"worst: {where}")


def check_gh_bubbles(p: int = 6, seed: int = SEED) -> CheckResult:
    """``(H_h, D^2 w) = (f, w)`` for element bubbles ``(l1 l2 l3)^2 q``."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for prob, mesh in ((square_sine(), uniform_bisect(unit_square())),
                       (lshape_singular(), _test_mesh())):
        sol = discrete_solve(prob, mesh, p)
        for e in rng.choice(mesh.n_elements, size=3, replace=False):
            c = rng.normal(size=p - 5)
            xc = mesh.centroids[e]

            def q(x, c=c, xc=xc):
                return np.polynomial.polynomial.polyval(x[:, 0] - xc[0] + x[:, 1] - xc[1], c)

            w = element_bubble(sol.space, int(e), q)
            worst = max(worst, galerkin_bubble_residual(sol.H, prob.f, w))
    return _below("generalized Hessian Galerkin property on bubbles", worst, TOL_GH, f"p={p}")


def _poly_callables(c: np.ndarray):
    """Value, gradient and Hessian callables of ``sum c[i, j] x^i y^j``."""
    P = np.polynomial.polynomial

    def d(nx, ny):
        cc = c
        if nx:
            cc = P.polyder(cc, nx, axis=0)
        if ny:
            cc = P.polyder(cc, ny, axis=1)
        return cc

    def ev(cc, x):
        return P.polyval2d(x[:, 0], x[:, 1], cc)

    def deriv(order):
        idx = [(a, order - a) for a in range(order + 1)]

        def fn(x):
            vals = {k: ev(d(*k), x) for k in idx}
            out = np.empty((len(x),) + (2,) * order)
            for multi in np.ndindex(*(2,) * order):
                nx = sum(1 for m in multi if m == 0)
                out[(slice(None),) + multi] = vals[(nx, order - nx)]
            return out
        return fn

    return (lambda x: ev(c, x)), deriv(1), deriv(2), deriv(3), deriv(4)


def check_green_identity(trials: int = 10, seed: int = SEED) -> CheckResult:
    """Div-div Green identity on random triangles with random cubic data."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        V = rng.uniform(-1, 1, size=(3, 2))
        if abs(np.linalg.det(np.column_stack([V[1] - V[0], V[2] - V[0]]))) < 0.1:
            continue
        comps = [_poly_callables(random_polynomial(3, rng)) for _ in range(3)]

        def tensor(order):
            def fn(x):
                a, b, e = (cp[order](x) for cp in comps)
                return np.stack([np.stack([a, b], 1), np.stack([b, e], 1)], 1)
            return fn

        v, gv, hv, _, _ = _poly_callables(random_polynomial(3, rng))
        worst = max(worst, green_identity_residual(V, tensor(0), tensor(1), tensor(2), v, gv, hv))
    return _below("Green identity", worst, TOL_GREEN, f"{trials} random triangles")


def check_complex(p: int = 3, seed: int = SEED) -> CheckResult:
    """``div div sym curl theta = 0`` and ``curl D^2 q = 0`` element-wise."""
    rng = np.random.default_rng(seed)
    mesh = _test_mesh()
    lag = LagrangeSpace(mesh, p)
    cx, cy = random_polynomial(p, rng), random_polynomial(p, rng)
    P = np.polynomial.polynomial
    theta = lag.interpolate(lambda x: np.stack([P.polyval2d(x[:, 0], x[:, 1], cx),
                                                P.polyval2d(x[:, 0], x[:, 1], cy)], -1))
    S = symcurl_lagrange(mesh, p, theta, lag)
    dd = np.abs(tensor_divdiv(S)).max() / max(np.abs(S.eval_volume(2)[2]).max(), 1e-300)
    space = DGSpace(mesh, p + 2)
    Dq = broken_hessian(random_field(space, rng))
    cu = np.abs(tensor_curl(Dq)).max() / max(np.abs(Dq.eval_volume(1)[1]).max(), 1e-300)
    return _below("div div sym curl = 0 and curl Hessian = 0", max(dd, cu), TOL_COMPLEX,
                  f"divdiv {dd:.1e}, curl {cu:.1e}")


def check_coercivity(penalties: PenaltyConfig | None = None, p: int = 2, samples: int = 100,
                     seed: int = SEED) -> CheckResult:
    """``B_h(v, v) > 0`` on random fields and positive definiteness of the matrix.

    The value is the smallest eigenvalue of ``A`` relative to its largest one;
    it must exceed :data:`COERCIVITY_FLOOR`.  The sparse factorization must
    also succeed without a non-positive pivot.
    """
    rng = np.random.default_rng(seed)
    mesh = _test_mesh()
    pen = penalties or PenaltyConfig.default(p)
    p = pen.p
    space = DGSpace(mesh, p)
    A, _ = assemble_system(mesh, p, pen, None, BoundaryData.homogeneous(), space)
    vals = [float(v.vector() @ (A @ v.vector()))
            for v in (random_field(space, rng) for _ in range(samples))]
    ev = np.linalg.eigvalsh(A.matrix.toarray())
    rel = ev[0] / ev[-1]
    try:
        solve(A, rng.normal(size=space.ndof), block=space.nb)
        factor_ok = True
    except IndefiniteError:
        factor_ok = False
    passed = min(vals) > 0 and rel > COERCIVITY_FLOOR and factor_ok
    detail = (f"c_sigma={pen.c_sigma:g}, c_tau={pen.c_tau:g}, min B(v,v)={min(vals):.3e}, "
              f"factorization {'ok' if factor_ok else 'indefinite'}")
    return CheckResult("coercivity", float(rel), COERCIVITY_FLOOR, passed, detail)


def check_coercivity_failure_detected(p: int = 2) -> CheckResult:
    """The coercivity check must fail once both penalties are switched off."""
    res = check_coercivity(PenaltyConfig(0.0, 0.0, p), p)
    return CheckResult("coercivity loss detected at zero penalties", res.value,
                       COERCIVITY_FLOOR, not res.passed, res.detail)


def check_reproduction(degrees=(2, 3, 4), seed: int = SEED) -> CheckResult:
    """Degree-p polynomial solutions are recovered and both estimators vanish."""
    rng = np.random.default_rng(seed)
    worst, parts = 0.0, []
    for p in degrees:
        prob = polynomial_problem(random_polynomial(p, rng), lshape)
        mesh = _test_mesh()
        sol = discrete_solve(prob, mesh, p)
        scale = dg_norm(_interpolate(sol.space, prob.u))
        err = dg_error(prob.hess, sol.u_h, prob.boundary) / scale
        e = eta(mesh, p, sol.H, prob.f, prob.boundary).eta
        g = gimel(mesh, p, sol.u_h, prob.f, prob.boundary).gimel
        worst = max(worst, err, e, g)
        parts.append(f"p={p}: err {err:.1e} eta {e:.1e} gimel {g:.1e}")
    return _below("polynomial reproduction", worst, TOL_REPRODUCTION, "; ".join(parts))


def comparison_constants(degrees=(2, 3, 4, 5), levels: int = 3) -> list[tuple[str, float]]:
    """Patchwise comparison constants for uniform runs of both test problems."""
    out = []
    for prob in (square_sine(), lshape_singular()):
        for p in degrees:
            mesh = prob.initial_mesh()
            for level in range(1, levels + 1):
                if level > 1:
                    mesh = uniform_bisect(mesh)
                sol = discrete_solve(prob, mesh, p)
                rep = eta(mesh, p, sol.H, prob.f, prob.boundary).merge(
                    gimel(mesh, p, sol.u_h, prob.f, prob.boundary))
                out.append((f"{prob.name} p={p} level {level}", comparison_constant(rep, mesh)))
    return out


def check_comparison(degrees=(2, 3, 4, 5), levels: int = 3) -> CheckResult:
    """``eta_T <= C (sum over the patch of gimel^2)^(1/2)`` with one constant for all runs."""
    consts = comparison_constants(degrees, levels)
    name, worst = max(consts, key=lambda t: t[1])
    return _below("patchwise comparison constant", worst, COMPARISON_BOUND,
                  f"{len(consts)} runs, worst: {name}")


@dataclass
class VerifyReport:
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self) -> list[str]:
        return [r.line() for r in self.results]


def run_all(penalties: PenaltyConfig | None = None, quick: bool = False) -> VerifyReport:
    """Run the complete invariant suite.

    ``penalties`` overrides the defaults in the coercivity check (used to
    demonstrate failure detection).  ``quick`` shortens the comparison runs.
    """
    checks = [
        check_lifting_vanishing,
        check_form_equivalence,
        check_gh_orthogonality,
        check_gh_bubbles,
        check_green_identity,
        check_complex,
        lambda: check_coercivity(penalties, penalties.p if penalties else 2),
        check_reproduction,
        (lambda: check_comparison((2, 3), 2)) if quick else check_comparison,
    ]
    if penalties is None:
        checks.insert(7, check_coercivity_failure_detected)
    return VerifyReport([c() for c in checks])
