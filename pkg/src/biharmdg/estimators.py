"""A posteriori error estimators.

``eta`` is built on the generalized Hessian and contains no stabilization
parameter; ``gimel`` is the classical DG residual estimator.  In both, every
power ``h^lambda`` is replaced by ``(h/p)^lambda``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .forms import BoundaryData, boundary_values, broken_hessian
from .polybasis import eval_basis, quad_triangle
from .space import DGField, DGSpace

ETA_TERMS = 5
GIMEL_TERMS = 6


@dataclass
class EstimatorReport:
    """Per-element indicators (non-negative, not squared) and global values.

    ``eta_terms[T, j]`` is the j-th term of the new estimator on element T and
    ``gimel_terms[T, l]`` the l-th term of the residual estimator.  Either part
    may be absent (``None``).
    """

    eta_terms: np.ndarray | None = None
    gimel_terms: np.ndarray | None = None
    oscillation: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def eta_T(self) -> np.ndarray:
        return np.sqrt(np.sum(self.eta_terms**2, axis=1))

    @property
    def gimel_T(self) -> np.ndarray:
        return np.sqrt(np.sum(self.gimel_terms**2, axis=1))

    @property
    def eta(self) -> float:
        return float(np.sqrt(np.sum(self.eta_terms**2)))

    @property
    def gimel(self) -> float:
        return float(np.sqrt(np.sum(self.gimel_terms**2)))

    def merge(self, other: "EstimatorReport") -> "EstimatorReport":
        return EstimatorReport(
            self.eta_terms if self.eta_terms is not None else other.eta_terms,
            self.gimel_terms if self.gimel_terms is not None else other.gimel_terms,
            self.oscillation if self.oscillation is not None else other.oscillation,
            {**other.extra, **self.extra})

    def write_csv(self, path) -> None:
        """One row per element: id, eta_1..eta_5, gimel_1..gimel_6 (blank when absent)."""
        n = len(self.eta_terms if self.eta_terms is not None else self.gimel_terms)
        header = (["element"] + [f"eta_{j}" for j in range(1, ETA_TERMS + 1)]
                  + [f"gimel_{l}" for l in range(1, GIMEL_TERMS + 1)])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for t in range(n):
                row = [t]
                for arr, k in ((self.eta_terms, ETA_TERMS), (self.gimel_terms, GIMEL_TERMS)):
                    row += [f"{v:.10e}" for v in arr[t]] if arr is not None else [""] * k
                w.writerow(row)


def _require_data(mesh, data):
    if data is None and np.any(mesh.boundary_facets):
        raise ValueError("boundary data is required on meshes with boundary facets "
                         "(use BoundaryData.homogeneous() for zero data)")


def _check_field(mesh, p, v: DGField, comp) -> "DGSpace":
    if v.mesh is not mesh or v.degree != p:
        raise ValueError("field does not live on the given mesh with degree p")
    if v.comp_shape != comp:
        raise ValueError(f"expected field components {comp}, got {v.comp_shape}")
    return v.space


def _volume_rule(space, boost: int = 4):
    return quad_triangle(space.quad_degree + boost)


def _volume_points(space, rule):
    x = space.mesh.to_physical(rule.points)
    w = np.abs(space.mesh.det_jacobian)[:, None] * rule.weights[None, :]
    return x, w


def _facet_sides(field: DGField, order: int):
    """Traces of a field (and derivatives) on both sides of every facet.

    Side-1 arrays of boundary facets are zero.
    """
    mesh = field.mesh
    F = np.arange(mesh.n_facets)
    inner = mesh.facet_elements[:, 1] >= 0
    side0 = field.eval_facets(F, 0, order)
    side1 = [np.zeros_like(a) for a in side0]
    if inner.any():
        vals = field.eval_facets(F[inner], 1, order)
        for a, b in zip(side1, vals):
            a[inner] = b
    return side0, side1, inner


def boundary_traces(field: DGField, facets, order: int, rule):
    """Traces of a field on the owner side of (boundary) facets with a given edge rule."""
    space = field.space
    basis = space.facet_basis(facets, 0, order, rule)
    c = field.coef[space.mesh.facet_elements[facets, 0]]
    out = []
    for arr in basis:
        nf, nq, nb = arr.shape[:3]
        a2 = arr.reshape(nf, nq, nb, -1)
        c2 = c.reshape(nf, nb, -1)
        out.append(np.einsum("fqnd,fnc->fqcd", a2, c2).reshape((nf, nq) + c.shape[2:] + arr.shape[3:]))
    return out


def _scatter(mesh, per_facet: np.ndarray, inner: np.ndarray, weight_inner: float, nel: int):
    """Add a per-facet quantity to both adjacent elements (scaled on interior facets)."""
    out = np.zeros(nel)
    fe = mesh.facet_elements
    w = np.where(inner, weight_inner, 1.0) * per_facet
    np.add.at(out, fe[:, 0], w)
    np.add.at(out, fe[inner, 1], w[inner])
    return out


def eta(mesh, p: int, H: DGField, f, boundary_data: BoundaryData | None) -> EstimatorReport:
    """Generalized-Hessian estimator: five terms per element.

    1. ``(h_T/p)^2 ||f - div div H||_T``
    2. ``(h_F/p)^(1/2) ||nu^T [[H]] nu||_F`` on interior facets, half to each side
    3. ``(h_F/p)^(3/2) ||d_tau(tau^T [[H]] nu) + nu^T [[div H]]||_F`` likewise
    4. ``(h_T/p) ||curl sym H||_T``
    5. ``(h_F/p)^(1/2) ||tau^T [[sym H]]||_F`` on all facets of T; on boundary
       facets the jump is ``tau^T sym H - (d_tt g1) tau - (d_tau g2) nu``.
    """
    space = _check_field(mesh, p, H, (2, 2))
    _require_data(mesh, boundary_data)
    nel = mesh.n_elements
    hT = mesh.h / p
    terms2 = np.zeros((nel, ETA_TERMS))

    rule = _volume_rule(space)
    x, w = _volume_points(space, rule)
    _, gH, hH = H.eval_at(np.arange(nel), rule.points, 2)
    divdiv = np.einsum("eqijij->eq", hH)
    fx = np.asarray(f(x.reshape(-1, 2)), dtype=float).reshape(x.shape[:2])
    terms2[:, 0] = hT**4 * np.sum(w * (fx - divdiv) ** 2, axis=1)
    gS = 0.5 * (gH + np.swapaxes(gH, 2, 3))
    curl = gS[..., 1, 0] - gS[..., 0, 1]  # (curl A)_i = d_x A_i2 - d_y A_i1
    terms2[:, 3] = hT**2 * np.sum(w * np.sum(curl**2, axis=-1), axis=1)

    (v0, g0), (v1, g1), inner = _facet_sides(H, 1)
    nu, tau = mesh.facet_normal, mesh.facet_tangent
    hF = mesh.facet_h / p
    W = space.facet_weights(np.arange(mesh.n_facets))
    jH = v0 - v1
    jG = g0 - g1
    nn = np.einsum("fqij,fi,fj->fq", jH, nu, nu)
    t2 = np.einsum("fqijk,fi,fj,fk->fq", jG, tau, nu, tau) + np.einsum("fqijj,fi->fq", jG, nu)
    e2 = np.where(inner, hF * np.sum(W * nn**2, axis=1), 0.0)
    e3 = np.where(inner, hF**3 * np.sum(W * t2**2, axis=1), 0.0)
    terms2[:, 1] = _scatter(mesh, e2, inner, 0.5, nel)
    terms2[:, 2] = _scatter(mesh, e3, inner, 0.5, nel)

    jS = 0.5 * (jH + np.swapaxes(jH, 2, 3))
    ts = np.einsum("fi,fqij->fqj", tau, jS)
    e5 = hF * np.sum(W * np.sum(ts**2, axis=-1), axis=1)
    bnd = np.flatnonzero(~inner)
    if bnd.size:
        drule = space.dquad
        Hb = boundary_traces(H, bnd, 0, drule)[0]
        Sb = 0.5 * (Hb + np.swapaxes(Hb, 2, 3))
        _, _, T = boundary_values(space, bnd, boundary_data, drule)
        res = np.einsum("fi,fqij->fqj", tau[bnd], Sb) - T
        Wd = space.facet_weights(bnd, drule)
        e5[bnd] = hF[bnd] * np.sum(Wd * np.sum(res**2, axis=-1), axis=1)
    terms2[:, 4] = _scatter(mesh, e5, inner, 1.0, nel)
    return EstimatorReport(eta_terms=np.sqrt(np.maximum(terms2, 0.0)),
                           oscillation=oscillation(space, f, rule))


def gimel(mesh, p: int, u_h: DGField, f, boundary_data: BoundaryData | None) -> EstimatorReport:
    """Classical DG residual estimator: six terms per element.

    1. ``(h_T/p)^2 ||f - div div D^2 u_h||_T``
    2. ``(h_F/p)^(-3/2) ||[[u_h]]||_F`` and 3. ``(h_F/p)^(-1/2) ||[[grad u_h]]||_F``
       on all facets of T (boundary jumps against g1, g2 nu + d_tau g1 tau)
    4. ``(h_F/p)^(1/2) ||[[D^2 u_h]] nu||_F`` on interior facets
    5. ``(h_F/p)^(1/2) ||[[D^2 u_h]] tau||_F`` on all facets; on boundary facets
       ``D^2 u_h tau - (d_tt g1) tau - (d_tau g2) nu``
    6. ``(h_F/p)^(3/2) ||[[div D^2 u_h]] . nu||_F`` on interior facets
    """
    space = _check_field(mesh, p, u_h, ())
    _require_data(mesh, boundary_data)
    nel = mesh.n_elements
    hT = mesh.h / p
    terms2 = np.zeros((nel, GIMEL_TERMS))

    rule = _volume_rule(space)
    x, w = _volume_points(space, rule)
    D = broken_hessian(u_h)
    hD = D.eval_at(np.arange(nel), rule.points, 2)[2]
    bilap = np.einsum("eqijij->eq", hD)
    fx = np.asarray(f(x.reshape(-1, 2)), dtype=float).reshape(x.shape[:2])
    terms2[:, 0] = hT**4 * np.sum(w * (fx - bilap) ** 2, axis=1)

    s0, s1, inner = _facet_sides(u_h, 3)
    nu, tau = mesh.facet_normal, mesh.facet_tangent
    hF = mesh.facet_h / p
    W = space.facet_weights(np.arange(mesh.n_facets))
    jv, jg, jh, j3 = (a - b for a, b in zip(s0, s1))
    e2 = hF**-3 * np.sum(W * jv**2, axis=1)
    e3 = hF**-1 * np.sum(W * np.sum(jg**2, axis=-1), axis=1)
    hn = np.einsum("fqij,fj->fqi", jh, nu)
    ht = np.einsum("fqij,fj->fqi", jh, tau)
    dn = np.einsum("fqijj,fi->fq", j3, nu)
    e4 = np.where(inner, hF * np.sum(W * np.sum(hn**2, axis=-1), axis=1), 0.0)
    e5 = hF * np.sum(W * np.sum(ht**2, axis=-1), axis=1)
    e6 = np.where(inner, hF**3 * np.sum(W * dn**2, axis=1), 0.0)
    bnd = np.flatnonzero(~inner)
    if bnd.size:
        drule = space.dquad
        vb, gb, hb = boundary_traces(u_h, bnd, 2, drule)
        g1v, G, T = boundary_values(space, bnd, boundary_data, drule)
        Wd = space.facet_weights(bnd, drule)
        hb_ = hF[bnd]
        e2[bnd] = hb_**-3 * np.sum(Wd * (vb - g1v) ** 2, axis=1)
        e3[bnd] = hb_**-1 * np.sum(Wd * np.sum((gb - G) ** 2, axis=-1), axis=1)
        res = np.einsum("fqij,fj->fqi", hb, tau[bnd]) - T
        e5[bnd] = hb_ * np.sum(Wd * np.sum(res**2, axis=-1), axis=1)
    for k, e in enumerate((e2, e3, e4, e5, e6), start=1):
        terms2[:, k] = _scatter(mesh, e, inner, 1.0, nel)
    return EstimatorReport(gimel_terms=np.sqrt(np.maximum(terms2, 0.0)))


def oscillation(space, f, rule=None) -> np.ndarray:
    """``(h_T/p)^2 ||f - Pi_p f||_T`` with Pi_p the element-wise L2 projection."""
    rule = rule or _volume_rule(space)
    x, w = _volume_points(space, rule)
    fx = np.asarray(f(x.reshape(-1, 2)), dtype=float).reshape(x.shape[:2])
    phi = eval_basis(space.p, rule.points, 0).values
    ref_mass = np.einsum("q,qm,qn->mn", rule.weights, phi, phi)
    c = np.linalg.solve(ref_mass, np.einsum("q,qm,eq->me", rule.weights, phi, fx)).T
    r = fx - c @ phi.T
    return (space.mesh.h / space.p) ** 2 * np.sqrt(np.sum(w * r**2, axis=1))


def comparison_constant(report: EstimatorReport, mesh) -> float:
    """``max_T eta_T / (sum over the vertex patch of T of gimel_T'^2)^(1/2)``."""
    adj = mesh.element_adjacency
    patch = adj @ (report.gimel_T**2)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(patch > 0, report.eta_T / np.sqrt(patch), 0.0)
    return float(ratio.max())
