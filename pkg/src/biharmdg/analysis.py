"""Error measures, effectivity indices, convergence orders and uniform runs."""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .estimators import EstimatorReport, boundary_traces, eta, gimel
from .forms import (BoundaryData, Lifting, PenaltyConfig, assemble_system, boundary_values,
                    generalized_hessian)
from .linalg import SolverError, solve
from .mesh import Mesh, uniform_bisect, uniform_refine
from .polybasis import QuadRule, quad_triangle
from .space import DGField, DGSpace

CSV_COLUMNS = ("level", "nelem", "ndof", "err_hess", "eoc_hess", "err_dg", "eoc_dg",
               "eta", "gimel", "eff_hess", "eff_dg")
PSTUDY_COLUMNS = ("p", "nelem", "ndof", "err_hess", "err_dg", "eta", "gimel", "eff_hess",
                  "eff_dg", "status")
ERROR_QUAD_EXTRA = 8
CORNER_SUBDIVISIONS = 3
ZERO_ERROR = 1e-14


class ZeroErrorError(ZeroDivisionError):
    """Effectivity requested for a (numerically) exact solution."""


# --- quadrature ------------------------------------------------------------

def graded_rule(base: QuadRule, vertex: int, levels: int = CORNER_SUBDIVISIONS) -> QuadRule:
    """Composite rule on the reference triangle refined dyadically toward one vertex.

    At each level the triangle touching ``vertex`` is split into its four
    midpoint children; the three away from the vertex keep the base rule.
    """
    ref = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    order = [vertex, (vertex + 1) % 3, (vertex + 2) % 3]
    tri = ref[order]
    pts, wts = [], []

    def add(t):
        J = np.column_stack([t[1] - t[0], t[2] - t[0]])
        pts.append(t[0] + base.points @ J.T)
        wts.append(base.weights * abs(np.linalg.det(J)))

    for _ in range(levels):
        a, b, c = tri
        ab, bc, ca = (a + b) / 2, (b + c) / 2, (c + a) / 2
        add(np.array([ab, b, bc]))
        add(np.array([ca, bc, c]))
        add(np.array([bc, ca, ab]))
        tri = np.array([a, ab, ca])
    add(tri)
    return QuadRule(np.vstack(pts), np.concatenate(wts), base.degree)


def _corner_elements(mesh: Mesh, point):
    """(element, local vertex) pairs of elements having ``point`` as a vertex."""
    if point is None:
        return []
    hit = np.all(np.isclose(mesh.vertices[mesh.triangles], np.asarray(point)), axis=-1)
    els, loc = np.nonzero(hit)
    return list(zip(els.tolist(), loc.tolist()))


def _volume_integral(mesh: Mesh, p: int, integrand, singular_point=None, boost: int = 0):
    """Sum over elements of the integral of ``integrand(elements, ref_points, x)``.

    ``integrand`` returns pointwise values of shape (nel, nq).  Elements at
    ``singular_point`` use a corner-graded rule.
    """
    rule = quad_triangle(2 * p + ERROR_QUAD_EXTRA + boost)
    special = _corner_elements(mesh, singular_point)
    mask = np.ones(mesh.n_elements, dtype=bool)
    mask[[e for e, _ in special]] = False
    regular = np.flatnonzero(mask)
    total = np.zeros(mesh.n_elements)

    def run(els, r):
        x = mesh.to_physical(r.points, els)
        w = np.abs(mesh.det_jacobian[els])[:, None] * r.weights[None, :]
        total[els] += np.sum(w * integrand(els, r.points, x), axis=1)

    if regular.size:
        run(regular, rule)
    for e, v in special:
        run(np.array([e]), graded_rule(rule, v))
    return total


# --- error measures ----------------------------------------------------------

def hessian_error(hess, H: DGField, singular_point=None, boost: int = 0) -> float:
    """``||D^2 u - H_h||_0`` by element quadrature of exactness 2p + 8."""
    def integrand(els, ref, x):
        Hh = H.eval_at(els, ref, 0)[0]
        ex = np.asarray(hess(x.reshape(-1, 2))).reshape(Hh.shape)
        return np.einsum("eqij,eqij->eq", ex - Hh, ex - Hh)

    val = _volume_integral(H.mesh, H.degree, integrand, singular_point, boost)
    return float(np.sqrt(np.sum(val)))


def dg_error(hess, u_h: DGField, boundary_data: BoundaryData, singular_point=None,
             boost: int = 0) -> float:
    """``||u - u_h||_DG``; interior jumps of u vanish, boundary jumps use the data."""
    mesh, space = u_h.mesh, u_h.space

    def integrand(els, ref, x):
        Hh = u_h.eval_at(els, ref, 2)[2]
        ex = np.asarray(hess(x.reshape(-1, 2))).reshape(Hh.shape)
        return np.einsum("eqij,eqij->eq", ex - Hh, ex - Hh)

    vol = np.sum(_volume_integral(mesh, u_h.degree, integrand, singular_point, boost))
    F = np.arange(mesh.n_facets)
    inner = mesh.facet_elements[:, 1] >= 0
    h = mesh.facet_h
    fac = 0.0
    fi = F[inner]
    if fi.size:
        v0, g0 = u_h.eval_facets(fi, 0, 1)
        v1, g1 = u_h.eval_facets(fi, 1, 1)
        W = space.facet_weights(fi)
        fac += np.sum(W * (h[fi, None] ** -3 * (v0 - v1) ** 2
                           + h[fi, None] ** -1 * np.sum((g0 - g1) ** 2, axis=-1)))
    fb = F[~inner]
    if fb.size:
        rule = space.dquad
        vb, gb = boundary_traces(u_h, fb, 1, rule)
        g1v, G, _ = boundary_values(space, fb, boundary_data, rule)
        W = space.facet_weights(fb, rule)
        fac += np.sum(W * (h[fb, None] ** -3 * (vb - g1v) ** 2
                           + h[fb, None] ** -1 * np.sum((gb - G) ** 2, axis=-1)))
    return float(np.sqrt(vol + fac))


def effectivity(estimate: float, error: float) -> float:
    """``estimate / error``; raises when the error is below 1e-14."""
    if not error >= ZERO_ERROR:
        raise ZeroErrorError(f"error {error:.3e} is below {ZERO_ERROR:.0e}: "
                             "effectivity is undefined for an exact solution")
    return estimate / error


def eoc(errors, hs) -> np.ndarray:
    """Orders ``log(e_{l-1}/e_l) / log(h_{l-1}/h_l)``; the first entry is NaN."""
    e = np.asarray(errors, dtype=float)
    h = np.asarray(hs, dtype=float)
    out = np.full(e.shape, np.nan)
    if e.size > 1:
        out[1:] = np.log(e[:-1] / e[1:]) / np.log(h[:-1] / h[1:])
    return out


# --- runs --------------------------------------------------------------------

@dataclass
class RunRecord:
    """One level of a convergence study."""

    level: int
    nelem: int
    ndof: int
    h: float
    err_hess: float
    err_dg: float
    eta: float = float("nan")
    gimel: float = float("nan")
    eoc_hess: float = float("nan")
    eoc_dg: float = float("nan")
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def eff_hess(self) -> float:
        return effectivity(self.eta, self.err_hess)

    @property
    def eff_dg(self) -> float:
        return effectivity(self.gimel, self.err_dg)

    def row(self) -> dict:
        d = asdict(self)
        d["eff_hess"] = _safe(lambda: self.eff_hess)
        d["eff_dg"] = _safe(lambda: self.eff_dg)
        return {k: d[k] for k in CSV_COLUMNS}


def _safe(fn) -> float:
    try:
        return fn()
    except ZeroErrorError:
        return float("nan")


def fill_eoc(records: list[RunRecord]) -> list[RunRecord]:
    hs = [r.h for r in records]
    for name in ("hess", "dg"):
        orders = eoc([getattr(r, f"err_{name}") for r in records], hs)
        for r, o in zip(records, orders):
            setattr(r, f"eoc_{name}", float(o))
    return records


def write_records(records, path, warning: str | None = None) -> None:
    """CSV with the fixed columns; an optional trailing warning row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([_fmt(v) for v in r.row().values()])
        if warning:
            w.writerow([f"# {warning}"] + [""] * (len(CSV_COLUMNS) - 1))


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(v)
    return "nan" if not np.isfinite(v) else f"{v:.10e}"


@dataclass
class Solution:
    """Discrete solution on one mesh with its generalized Hessian."""

    space: DGSpace
    u_h: DGField
    H: DGField

    @property
    def mesh(self) -> Mesh:
        return self.space.mesh


def discrete_solve(problem, mesh: Mesh, p: int, penalties: PenaltyConfig | None = None,
                   quad_boost: int = 0) -> Solution:
    """Assemble, solve and post-process the IPDG system for ``problem`` on ``mesh``."""
    space = DGSpace(mesh, p, quad_degree=2 * p + 4 + quad_boost)
    A, b = assemble_system(mesh, p, penalties, problem.f, problem.boundary, space)
    x = solve(A, b, block=space.nb)
    u_h = DGField.from_vector(space, x)
    H = generalized_hessian(u_h, problem.boundary, Lifting(space))
    return Solution(space, u_h, H)


def evaluate(problem, sol: Solution, level: int, h: float, quad_boost: int = 0,
             estimators=("eta", "gimel")) -> tuple[RunRecord, EstimatorReport]:
    """Errors and estimators of a solution as a :class:`RunRecord`."""
    mesh, p = sol.mesh, sol.space.p
    data = problem.boundary
    rep = EstimatorReport()
    if "eta" in estimators:
        rep = rep.merge(eta(mesh, p, sol.H, problem.f, data))
    if "gimel" in estimators:
        rep = rep.merge(gimel(mesh, p, sol.u_h, problem.f, data))
    rec = RunRecord(
        level=level, nelem=mesh.n_elements, ndof=sol.space.ndof, h=h,
        err_hess=hessian_error(problem.hess, sol.H, problem.singular_point, quad_boost),
        err_dg=dg_error(problem.hess, sol.u_h, data, problem.singular_point, quad_boost),
        eta=rep.eta if rep.eta_terms is not None else float("nan"),
        gimel=rep.gimel if rep.gimel_terms is not None else float("nan"))
    return rec, rep


REFINEMENTS = {"bisection": uniform_bisect, "red": uniform_refine}


def run_uniform(problem, p: int, levels: int, penalties: PenaltyConfig | None = None,
                max_dofs: int | None = None, quad_boost: int = 0, mesh: Mesh | None = None,
                refinement: str = "bisection", callback=None
                ) -> tuple[list[RunRecord], str | None]:
    """Uniform refinement study; level 1 is the problem's initial mesh.

    Each level halves h, either by two sweeps of newest vertex bisection
    (``"bisection"``, default) or by red refinement (``"red"``).  Returns the
    records and a warning message when ``max_dofs`` truncated the run.
    """
    try:
        refine = REFINEMENTS[refinement]
    except KeyError:
        raise ValueError(f"unknown refinement {refinement!r}") from None
    records: list[RunRecord] = []
    warning = None
    mesh = mesh or problem.initial_mesh()
    nb = (p + 1) * (p + 2) // 2
    for level in range(1, levels + 1):
        if level > 1:
            mesh = refine(mesh)
        if max_dofs is not None and mesh.n_elements * nb > max_dofs:
            warning = (f"stopped before level {level}: {mesh.n_elements * nb} dofs "
                       f"exceed max-dofs {max_dofs}")
            break
        t0 = time.perf_counter()
        sol = discrete_solve(problem, mesh, p, penalties, quad_boost)
        rec, _ = evaluate(problem, sol, level, float(mesh.h.max()), quad_boost)
        rec.seconds = time.perf_counter() - t0
        records.append(rec)
        fill_eoc(records)
        if callback:
            callback(rec)
    return records, warning


def run_pstudy(problem, degrees, mesh: Mesh | None = None, quad_boost: int = 0,
               penalties=None, callback=None) -> list[dict]:
    """Degree study on a fixed mesh; one row per degree.

    ``penalties`` maps a degree to a :class:`PenaltyConfig` (defaults if None).
    A solver failure at one degree is recorded in the ``status`` column and
    the study continues.
    """
    mesh = mesh or problem.initial_mesh()
    rows = []
    for p in degrees:
        row = dict.fromkeys(PSTUDY_COLUMNS, float("nan"))
        row.update(p=int(p), nelem=mesh.n_elements, ndof=mesh.n_elements * (p + 1) * (p + 2) // 2)
        try:
            pen = penalties(p) if penalties else None
            sol = discrete_solve(problem, mesh, p, pen, quad_boost)
            rec, _ = evaluate(problem, sol, 1, float(mesh.h.max()), quad_boost)
        except SolverError as exc:
            row["status"] = f"solver failure: {exc}"
        else:
            row.update(err_hess=rec.err_hess, err_dg=rec.err_dg, eta=rec.eta, gimel=rec.gimel,
                       eff_hess=_safe(lambda: rec.eff_hess), eff_dg=_safe(lambda: rec.eff_dg),
                       status="ok")
        rows.append(row)
        if callback:
            callback(row)
    return rows


def write_rows(rows: list[dict], columns, path) -> None:
    """CSV of dictionaries restricted to ``columns``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([v if isinstance(v, str) else _fmt(v) for v in (r[k] for k in columns)])
