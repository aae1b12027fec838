"""IPDG assembly for the clamped biharmonic problem, lifting and generalized Hessian.

Conventions
-----------
* Facet normals point out of the owner (side 0, lower element id); on
  boundary facets they are outward.  Jumps are ``v_0 - v_1`` on interior
  facets and ``v - data`` on boundary facets; averages are one-sided on the
  boundary.
* Row-wise divergence: ``(div B)_i = sum_j d_j B_ij``.
* Curl: ``curl v = (d_y v, -d_x v)``; for vectors, row ``i`` of ``curl theta`` is
  ``curl theta_i``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .linalg import SparseSym
from .mesh import Mesh
from .polybasis import eval_basis, lagrange_nodes, quad_edge, quad_triangle
from .space import DGField, DGSpace

Array = np.ndarray
Fn = Callable[[Array], Array]


@dataclass(frozen=True)
class PenaltyConfig:
    """Stabilization parameters for the jump penalties.

    ``c_sigma`` multiplies ``h^-3 [[u]][[v]]`` and ``c_tau`` multiplies
    ``h^-1 [[grad u]].[[grad v]]``.  Zero values are accepted only so that
    loss of coercivity can be demonstrated.
    """

    c_sigma: float
    c_tau: float
    p: int

    def __post_init__(self):
        if self.c_sigma < 0 or self.c_tau < 0:
            raise ValueError("penalty parameters must be non-negative")
        if self.p < 2:
            raise ValueError("polynomial degree must be at least 2")

    @classmethod
    def default(cls, p: int) -> "PenaltyConfig":
        return cls(3.0 * p**6, 9.0 * p**2, p)


@dataclass(frozen=True)
class BoundaryData:
    """Clamped boundary data and its tangential derivatives along straight facets.

    Every callable receives points ``x`` (n, 2), unit normals ``nu`` (n, 2)
    and unit tangents ``tau`` (n, 2) and returns an array of shape (n,).
    """

    g1: Callable
    g2: Callable
    dtau_g1: Callable
    dtt_g1: Callable
    dtau_g2: Callable

    @classmethod
    def homogeneous(cls) -> "BoundaryData":
        def zero(x, nu, tau):
            return np.zeros(len(x))
        return cls(zero, zero, zero, zero, zero)

    @classmethod
    def from_exact(cls, u: Fn, grad: Fn, hess: Fn) -> "BoundaryData":
        """Data of a known solution: traces of u, its gradient and Hessian."""
        return cls(
            g1=lambda x, nu, tau: u(x),
            g2=lambda x, nu, tau: np.einsum("ni,ni->n", grad(x), nu),
            dtau_g1=lambda x, nu, tau: np.einsum("ni,ni->n", grad(x), tau),
            dtt_g1=lambda x, nu, tau: np.einsum("ni,nij,nj->n", tau, hess(x), tau),
            dtau_g2=lambda x, nu, tau: np.einsum("ni,nij,nj->n", tau, hess(x), nu),
        )

    def gradient_trace(self, x, nu, tau) -> Array:
        """``g2 nu + (d_tau g1) tau``, shape (n, 2)."""
        return self.g2(x, nu, tau)[:, None] * nu + self.dtau_g1(x, nu, tau)[:, None] * tau

    def tangent_hessian(self, x, nu, tau) -> Array:
        """``(d_tt g1) tau + (d_tau g2) nu``, shape (n, 2)."""
        return self.dtt_g1(x, nu, tau)[:, None] * tau + self.dtau_g2(x, nu, tau)[:, None] * nu


def _chunks(n: int, size: int):
    size = max(1, size)
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def _chunk_size(space: DGSpace, width: int = 1) -> int:
    per = len(space.fquad.weights) * space.nb * 16 * width
    return max(1, 4_000_000 // per)


def boundary_values(space: DGSpace, facets: Array, data: BoundaryData, rule=None):
    """Boundary data at facet quadrature points: (g1, grad trace, tangent Hessian)."""
    m = space.mesh
    x = space.facet_points(facets, rule)
    nf, nq = x.shape[:2]
    nu = np.repeat(m.facet_normal[facets], nq, axis=0)
    tau = np.repeat(m.facet_tangent[facets], nq, axis=0)
    xf = x.reshape(-1, 2)
    g1 = np.asarray(data.g1(xf, nu, tau), dtype=float).reshape(nf, nq)
    G = data.gradient_trace(xf, nu, tau).reshape(nf, nq, 2)
    T = data.tangent_hessian(xf, nu, tau).reshape(nf, nq, 2)
    return g1, G, T


def _side_terms(space: DGSpace, facets: Array, side: int, rule=None):
    """Per-basis traces needed by the facet integrals."""
    val, grad, hess, d3 = space.facet_basis(facets, side, 3, rule)
    nu = space.mesh.facet_normal[facets]
    hn = np.einsum("fqnij,fj->fqni", hess, nu)
    # nu . div D^2 phi = nu_i d_j d_j d_i phi
    ndiv = np.einsum("fqnijj,fi->fqn", d3, nu)
    return val, grad, hn, ndiv


# --- assembly ------------------------------------------------------------

def _volume_stiffness(space: DGSpace) -> Array:
    """Per-element Hessian stiffness blocks, (nel, nb, nb)."""
    t, w = space.vtable, space.vquad.weights
    R = np.einsum("q,qmab,qncd->abcdmn", w, t.hess, t.hess, optimize=True)
    K = space.mesh.inv_jacobian
    M = np.einsum("eai,eci->eac", K, K)
    S = np.einsum("eac,ebd,abcdmn->emn", M, M, R, optimize=True)
    return S * np.abs(space.mesh.det_jacobian)[:, None, None]


def load_vector(space: DGSpace, f: Fn | None, quad_degree: int | None = None) -> Array:
    """``(f, phi)`` for every basis function."""
    if f is None:
        return np.zeros(space.ndof)
    q = quad_triangle(quad_degree or space.quad_degree)
    phi = eval_basis(space.p, q.points, 0).values
    x = space.mesh.to_physical(q.points)
    fx = np.asarray(f(x.reshape(-1, 2)), dtype=float).reshape(x.shape[:2])
    det = np.abs(space.mesh.det_jacobian)
    return np.einsum("e,q,eq,qn->en", det, q.weights, fx, phi).reshape(-1)


def assemble_system(mesh: Mesh, p: int, penalties: PenaltyConfig | None = None,
                    f: Fn | None = None, boundary_data: BoundaryData | None = None,
                    space: DGSpace | None = None, extended: bool = True
                    ) -> tuple[SparseSym, Array]:
    """Matrix and right-hand side of the symmetric IPDG discretization.

    Boundary data enters through the modified jumps ``u - g1`` and
    ``grad u - (g2 nu + d_tau g1 tau)``; its contributions are moved to the
    right-hand side.  ``boundary_data=None`` means homogeneous data.

    With ``extended`` the value-jump penalty, whose ``p^6 h^-3`` scaling
    makes the discrete solution sensitive to rounding of its entries on fine
    meshes, is assembled in extended precision; the matrix then carries a
    ``precise`` copy and ``b`` is returned in extended precision.
    """
    if p < 2:
        raise ValueError("polynomial degree must be at least 2")
    space = space or DGSpace(mesh, p)
    if space.mesh is not mesh or space.p != p:
        raise ValueError("space does not match mesh and degree")
    pen = penalties or PenaltyConfig.default(p)
    nb, nel = space.nb, mesh.n_elements

    ext = np.longdouble if extended else None
    rows, cols, vals = [], [], []
    srows, scols, svals = [], [], []
    S = _volume_stiffness(space)
    dofs = space.element_dofs(np.arange(nel))
    rows.append(np.repeat(dofs, nb, axis=1).ravel())
    cols.append(np.tile(dofs, (1, nb)).ravel())
    vals.append(S.ravel())

    b = load_vector(space, f)
    if ext:
        b = b.astype(ext)
    fe = mesh.facet_elements
    interior = np.flatnonzero(fe[:, 1] >= 0)
    boundary = np.flatnonzero(fe[:, 1] < 0)

    for sl in _chunks(len(interior), _chunk_size(space, 4)):
        F = interior[sl]
        v0, g0, hn0, nd0 = _side_terms(space, F, 0)
        v1, g1, hn1, nd1 = _side_terms(space, F, 1)
        Jv = np.concatenate([v0, -v1], axis=2)
        Jg = np.concatenate([g0, -g1], axis=2)
        Ad = 0.5 * np.concatenate([nd0, nd1], axis=2)
        Ah = 0.5 * np.concatenate([hn0, hn1], axis=2)
        W = space.facet_weights(F)
        hF = mesh.facet_h[F]
        X = (np.einsum("fq,fqm,fqn->fmn", W, Jv, Ad, optimize=True)
             - np.einsum("fq,fqmi,fqni->fmn", W, Jg, Ah, optimize=True))
        P = pen.c_tau * hF[:, None, None] ** -1 * np.einsum("fq,fqmi,fqni->fmn", W, Jg, Jg,
                                                             optimize=True)
        d = np.concatenate([space.element_dofs(fe[F, 0]), space.element_dofs(fe[F, 1])], axis=1)
        if ext:
            Jx = np.concatenate([space.facet_basis(F, 0, 0, dtype=ext)[0],
                                 -space.facet_basis(F, 1, 0, dtype=ext)[0]], axis=2)
            _sigma_block(space, F, pen, Jx, d, srows, scols, svals)
        else:
            P = P + pen.c_sigma * hF[:, None, None] ** -3 * np.einsum("fq,fqm,fqn->fmn", W, Jv, Jv,
                                                                       optimize=True)
        loc = X + np.swapaxes(X, 1, 2) + P
        k = d.shape[1]
        rows.append(np.repeat(d, k, axis=1).ravel())
        cols.append(np.tile(d, (1, k)).ravel())
        vals.append(loc.ravel())

    data = boundary_data or BoundaryData.homogeneous()
    for sl in _chunks(len(boundary), _chunk_size(space, 2)):
        F = boundary[sl]
        v0, g0, hn0, nd0 = _side_terms(space, F, 0)
        W = space.facet_weights(F)
        hF = mesh.facet_h[F]
        X = (np.einsum("fq,fqm,fqn->fmn", W, v0, nd0, optimize=True)
             - np.einsum("fq,fqmi,fqni->fmn", W, g0, hn0, optimize=True))
        sig = pen.c_sigma * hF ** -3
        tau = pen.c_tau * hF ** -1
        P = tau[:, None, None] * np.einsum("fq,fqmi,fqni->fmn", W, g0, g0, optimize=True)
        d = space.element_dofs(fe[F, 0])
        if ext:
            _sigma_block(space, F, pen, space.facet_basis(F, 0, 0, dtype=ext)[0], d,
                         srows, scols, svals)
        else:
            P = P + sig[:, None, None] * np.einsum("fq,fqm,fqn->fmn", W, v0, v0, optimize=True)
        loc = X + np.swapaxes(X, 1, 2) + P
        rows.append(np.repeat(d, nb, axis=1).ravel())
        cols.append(np.tile(d, (1, nb)).ravel())
        vals.append(loc.ravel())
        if boundary_data is not None:
            rule = space.dquad
            Wd = space.facet_weights(F, rule)
            dv, dg, dhn, dnd = _side_terms(space, F, 0, rule)
            g1v, G, _ = boundary_values(space, F, data, rule)
            rhs = (np.einsum("fq,fq,fqm->fm", Wd, g1v, dnd)
                   - np.einsum("fq,fqi,fqmi->fm", Wd, G, dhn)
                   + tau[:, None] * np.einsum("fq,fqi,fqmi->fm", Wd, G, dg))
            if ext:
                dvx = space.facet_basis(F, 0, 0, rule, dtype=ext)[0]
                Wx = mesh.facet_h[F].astype(ext)[:, None] * rule.weights.astype(ext)
                sx = pen.c_sigma * mesh.facet_h[F].astype(ext) ** -3
                rhs = rhs + sx[:, None] * np.einsum("fq,fq,fqm->fm", Wx, g1v.astype(ext), dvx)
            else:
                rhs = rhs + sig[:, None] * np.einsum("fq,fq,fqm->fm", Wd, g1v, dv)
            np.add.at(b, d.ravel(), rhs.ravel())

    A = SparseSym.from_upper(np.concatenate(rows), np.concatenate(cols),
                             np.concatenate(vals), space.ndof)
    if ext:
        del rows, cols, vals
        As = SparseSym.from_upper(np.concatenate(srows), np.concatenate(scols),
                                  np.concatenate(svals), space.ndof, dtype=ext)
        A = SparseSym.with_precise(A.matrix.astype(ext) + As.matrix)
    return A, b


def _sigma_block(space: DGSpace, F: Array, pen: PenaltyConfig, J: Array, d: Array,
                 rows, cols, vals) -> None:
    """Value-jump penalty blocks from traces ``J`` (nf, nq, k) in their own precision."""
    dt = J.dtype
    h = space.mesh.facet_h[F].astype(dt)
    W = h[:, None] * space.fquad.weights.astype(dt)[None, :] * (pen.c_sigma * h ** -3)[:, None]
    P = np.einsum("fqm,fqn->fmn", W[:, :, None] * J, J)
    k = d.shape[1]
    rows.append(np.repeat(d, k, axis=1).ravel())
    cols.append(np.tile(d, (1, k)).ravel())
    vals.append(P.ravel())


# --- lifting and generalized Hessian ------------------------------------

class Lifting:
    """Linear lifting operator ``v -> L_h(v)`` into degree-p tensor fields.

    Applied matrix-free from facet traces; ``matrix`` assembles the same
    operator as a sparse matrix on the coefficient vector of ``v`` (tensor
    coefficients laid out as (nel, nb, 2, 2)).
    """

    def __init__(self, space: DGSpace):
        self.space = space

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        space = self.space
        mesh, nb = space.mesh, space.nb
        fe = mesh.facet_elements
        rows, cols, vals = [], [], []
        interior = np.flatnonzero(fe[:, 1] >= 0)
        for sl in _chunks(len(interior), _chunk_size(space, 16)):
            F = interior[sl]
            tabs = [space.facet_basis(F, 0, 1), space.facet_basis(F, 1, 1)]
            for s in range(2):
                for t in range(2):
                    sign = 0.5 if t == 0 else -0.5
                    self._block(F, fe[F, s], fe[F, t], tabs[s], tabs[t], sign, rows, cols, vals)
        boundary = np.flatnonzero(fe[:, 1] < 0)
        for sl in _chunks(len(boundary), _chunk_size(space, 4)):
            F = boundary[sl]
            tab = space.facet_basis(F, 0, 1)
            self._block(F, fe[F, 0], fe[F, 0], tab, tab, 1.0, rows, cols, vals)
        n = mesh.n_elements * nb
        if not rows:
            return sp.csr_matrix((4 * n, n))
        L = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(4 * n, n)).tocsr()
        L.sum_duplicates()
        return L

    def _block(self, F, es, et, tab_s, tab_t, weight, rows, cols, vals):
        """Contribution of the trace on side t to the lifting on the element of side s."""
        space = self.space
        mesh, nb = space.mesh, space.nb
        Vs, Gs = tab_s
        Vt, Gt = tab_t
        W = space.facet_weights(F)
        nu = mesh.facet_normal[F]
        # ([[v]], nu_i d_j phi_m) - ([[d_i v]], nu_j phi_m)
        A1 = np.einsum("fq,fqn,fqmj->fmjn", W, Vt, Gs, optimize=True)
        A2 = np.einsum("fq,fqni,fqm->fmin", W, Gt, Vs, optimize=True)
        C = np.einsum("fi,fmjn->fmijn", nu, A1) - np.einsum("fj,fmin->fmijn", nu, A2)
        C *= (weight / np.abs(mesh.det_jacobian[es]))[:, None, None, None, None]
        C = np.einsum("km,fmijn->fkijn", space.ref_mass_inv, C, optimize=True)
        r = (es[:, None, None, None, None] * (4 * nb)
             + np.arange(4 * nb).reshape(1, nb, 2, 2, 1))
        c = et[:, None, None, None, None] * nb + np.arange(nb).reshape(1, 1, 1, 1, nb)
        r, c = np.broadcast_arrays(r, c)
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(C.ravel())

    def data_term(self, data: BoundaryData | None) -> Array:
        """Contribution of inhomogeneous boundary data, shape (nel, nb, 2, 2)."""
        space = self.space
        mesh, nb = space.mesh, space.nb
        out = np.zeros((mesh.n_elements, nb, 2, 2))
        if data is None:
            return out
        bnd = np.flatnonzero(mesh.boundary_facets)
        for sl in _chunks(len(bnd), _chunk_size(space, 2)):
            F = bnd[sl]
            rule = space.dquad
            v0, g0 = space.facet_basis(F, 0, 1, rule)
            W = space.facet_weights(F, rule)
            nu = mesh.facet_normal[F]
            g1v, G, _ = boundary_values(space, F, data, rule)
            e = mesh.facet_elements[F, 0]
            C = (np.einsum("fq,fq,fi,fqmj->fmij", W, g1v, nu, g0, optimize=True)
                 - np.einsum("fq,fqi,fj,fqm->fmij", W, G, nu, v0, optimize=True))
            C = -np.einsum("km,fmij->fkij", space.ref_mass_inv, C) / np.abs(mesh.det_jacobian[e])[:, None, None, None]
            np.add.at(out, e, C)
        return out

    def __call__(self, v: DGField, data: BoundaryData | None = None) -> DGField:
        if v.space.mesh is not self.space.mesh:
            raise ValueError("field lives on a different mesh")
        if v.space.p != self.space.p:
            raise ValueError("field degree differs from the lifting degree")
        return DGField(self.space, self.apply(v.coef) + self.data_term(data))

    def apply(self, coef: Array) -> Array:
        """Homogeneous lifting of scalar coefficients (nel, nb) -> (nel, nb, 2, 2)."""
        space = self.space
        mesh, nb = space.mesh, space.nb
        v = DGField(space, coef)
        fe = mesh.facet_elements
        rhs = np.zeros((mesh.n_elements, nb, 2, 2))
        F_all = np.arange(mesh.n_facets)
        inner = fe[:, 1] >= 0
        for sl in _chunks(mesh.n_facets, _chunk_size(space, 4)):
            F = F_all[sl]
            ins = inner[F]
            jv, jg = v.eval_facets(F, 0, 1)
            if ins.any():
                v1, g1 = v.eval_facets(F[ins], 1, 1)
                jv[ins] -= v1
                jg[ins] -= g1
            W = space.facet_weights(F) * np.where(ins, 0.5, 1.0)[:, None]
            nu = mesh.facet_normal[F]
            for side in (0, 1):
                sel = np.flatnonzero(ins) if side else np.arange(len(F))
                if not sel.size:
                    continue
                Fs = F[sel]
                phi, dphi = space.facet_basis(Fs, side, 1)
                C = (np.einsum("fq,fq,fi,fqmj->fmij", W[sel], jv[sel], nu[sel], dphi, optimize=True)
                     - np.einsum("fq,fqi,fj,fqm->fmij", W[sel], jg[sel], nu[sel], phi, optimize=True))
                np.add.at(rhs, fe[Fs, side], C)
        rhs /= np.abs(mesh.det_jacobian)[:, None, None, None]
        return np.einsum("km,emij->ekij", space.ref_mass_inv, rhs, optimize=True)


def lifting(mesh: Mesh, p: int, v: DGField, boundary_data: BoundaryData | None = None,
            operator: Lifting | None = None) -> DGField:
    """Tensor field ``L_h(v)`` of degree p (modified boundary jumps if data given)."""
    if v.space.mesh is not mesh:
        raise ValueError("field lives on a different mesh")
    op = operator or Lifting(v.space if v.space.p == p else DGSpace(mesh, p))
    return op(v, boundary_data)


def broken_hessian(v: DGField) -> DGField:
    """Element-wise Hessian of a scalar field, projected exactly into the same space."""
    space = v.space
    H = v.eval_volume(2)[2]
    t, w = space.vtable, space.vquad.weights
    coef = np.einsum("km,q,qm,eqij->ekij", space.ref_mass_inv, w, t.values, H, optimize=True)
    return DGField(space, coef)


def generalized_hessian(u_h: DGField, boundary_data: BoundaryData | None = None,
                        operator: Lifting | None = None) -> DGField:
    """``H_h(u_h) = D^2_h u_h + L_h(u_h)`` as a degree-p tensor field."""
    op = operator or Lifting(u_h.space)
    L = op(u_h, boundary_data)
    return DGField(u_h.space, broken_hessian(u_h).coef + L.coef)


# --- bilinear form via liftings, DG norm ----------------------------------

def facet_jumps(v: DGField, facets: Array, data: BoundaryData | None = None):
    """Jumps of value and gradient at facet quadrature points.

    Returns arrays (nf, nq) and (nf, nq, 2).  On boundary facets the jumps
    are ``v - g1`` and ``grad v - (g2 nu + d_tau g1 tau)`` when data is given.
    """
    mesh = v.mesh
    fe = mesh.facet_elements[facets]
    val0, grad0 = v.eval_facets(facets, 0, 1)
    jv, jg = val0.copy(), grad0.copy()
    inner = fe[:, 1] >= 0
    if inner.any():
        val1, grad1 = v.eval_facets(facets[inner], 1, 1)
        jv[inner] -= val1
        jg[inner] -= grad1
    if data is not None and (~inner).any():
        g1v, G, _ = boundary_values(v.space, facets[~inner], data)
        jv[~inner] -= g1v
        jg[~inner] -= G
    return jv, jg


def _penalty_jumps(u: DGField, v: DGField, pen: PenaltyConfig) -> float:
    mesh = u.mesh
    F = np.arange(mesh.n_facets)
    ju, gu = facet_jumps(u, F)
    jv, gv = facet_jumps(v, F)
    W = u.space.facet_weights(F)
    h = mesh.facet_h[:, None]
    return float(pen.c_sigma * np.sum(W * h**-3 * ju * jv)
                 + pen.c_tau * np.sum(W * h**-1 * np.einsum("fqi,fqi->fq", gu, gv)))


def _l2_inner_tensor(A: DGField, B: DGField) -> float:
    a = A.eval_volume(0)[0]
    b = B.eval_volume(0)[0]
    return float(np.sum(A.space.quad_weights() * np.einsum("eqij,eqij->eq", a, b)))


def apply_bilinear(u_h: DGField, v_h: DGField, penalties: PenaltyConfig,
                   operator: Lifting | None = None) -> float:
    """``B_h(u_h, v_h)`` in its lifting form (Hessians, liftings, penalties)."""
    if u_h.space.mesh is not v_h.space.mesh:
        raise ValueError("fields live on different meshes")
    if u_h.space.p != v_h.space.p:
        raise ValueError("fields have different degrees")
    op = operator or Lifting(u_h.space)
    Du, Dv = broken_hessian(u_h), broken_hessian(v_h)
    Lu, Lv = op(u_h), op(v_h)
    return (_l2_inner_tensor(Du, Dv) + _l2_inner_tensor(Lu, Dv) + _l2_inner_tensor(Du, Lv)
            + _penalty_jumps(u_h, v_h, penalties))


def dg_norm(v: DGField, data: BoundaryData | None = None) -> float:
    """DG norm (broken Hessian plus weighted value and gradient jumps)."""
    mesh = v.mesh
    H = v.eval_volume(2)[2]
    vol = np.sum(v.space.quad_weights() * np.einsum("eqij,eqij->eq", H, H))
    F = np.arange(mesh.n_facets)
    jv, jg = facet_jumps(v, F, data)
    W = v.space.facet_weights(F)
    h = mesh.facet_h[:, None]
    fac = np.sum(W * (h**-3 * jv**2 + h**-1 * np.einsum("fqi,fqi->fq", jg, jg)))
    return float(np.sqrt(vol + fac))


# --- vector Lagrange fields and symcurl ------------------------------------

class LagrangeSpace:
    """Continuous scalar Lagrange space of degree p (vector fields use two copies)."""

    def __init__(self, mesh: Mesh, p: int):
        if p < 1:
            raise ValueError("Lagrange degree must be at least 1")
        self.mesh, self.p = mesh, p
        self.ref_nodes = lagrange_nodes(p)
        x = mesh.to_physical(self.ref_nodes)  # (nel, nloc, 2)
        scale = max(1.0, float(np.abs(mesh.vertices).max()))
        key = np.round(x.reshape(-1, 2) / scale * 2**40).astype(np.int64)
        uniq, inv = np.unique(key, axis=0, return_inverse=True)
        self.element_nodes = inv.reshape(x.shape[:2])
        self.nodes = np.zeros((len(uniq), 2))
        self.nodes[inv] = x.reshape(-1, 2)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def interpolate(self, fn: Fn) -> Array:
        """Nodal values of a vector function, shape (n_nodes, 2)."""
        return np.asarray(fn(self.nodes), dtype=float)


def _symcurl_local(grad: Array) -> Array:
    """Symmetric curl of scalar-times-unit-vector fields.

    ``grad`` (..., 2) of a scalar phi; returns (..., 2, 2, 2) where index -3
    selects the component c of ``phi e_c``.
    """
    gx, gy = grad[..., 0], grad[..., 1]
    z = np.zeros_like(gx)
    S0 = np.stack([np.stack([gy, -0.5 * gx], -1), np.stack([-0.5 * gx, z], -1)], -2)
    S1 = np.stack([np.stack([z, 0.5 * gy], -1), np.stack([0.5 * gy, -gx], -1)], -2)
    return np.stack([S0, S1], axis=-3)


def symcurl_lagrange(mesh: Mesh, p: int, theta: Array, lagrange: LagrangeSpace | None = None
                     ) -> DGField:
    """``sym curl theta`` for a continuous degree-p vector field as a degree p-1 tensor field."""
    lag = lagrange or LagrangeSpace(mesh, p)
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (lag.n_nodes, 2):
        raise ValueError(f"expected nodal coefficients of shape {(lag.n_nodes, 2)}, got {theta.shape}")
    target = DGSpace(mesh, max(p - 1, 0))
    q = target.vquad
    tab = eval_basis(p, q.points, 1, kind="lagrange")
    K = mesh.inv_jacobian
    g = np.einsum("eai,qna->eqni", K, tab.grad)  # (nel, nq, nloc, 2)
    loc = theta[lag.element_nodes]  # (nel, nloc, 2)
    S = np.einsum("eqncij,enc->eqij", _symcurl_local(g), loc, optimize=True)
    coef = np.einsum("km,q,qm,eqij->ekij", target.ref_mass_inv, q.weights, target.vtable.values,
                     S, optimize=True)
    return DGField(target, coef)


def _symcurl_functional(H: DGField, p: int, data: BoundaryData | None, lag: LagrangeSpace):
    """Unnormalized ``(H, sym curl theta_k)`` (+ boundary data term) and ``||sym curl theta_k||``."""
    mesh, sp_ = H.mesh, H.space
    tab = eval_basis(p, sp_.vquad.points, 1, kind="lagrange")
    g = np.einsum("eai,qna->eqni", mesh.inv_jacobian, tab.grad)
    S = _symcurl_local(g)  # (nel, nq, nloc, 2, 2, 2)
    Hq = H.eval_volume(0)[0]
    w = sp_.quad_weights()
    r = np.zeros((lag.n_nodes, 2))
    n2 = np.zeros((lag.n_nodes, 2))
    np.add.at(r, lag.element_nodes, np.einsum("eq,eqij,eqncij->enc", w, Hq, S, optimize=True))
    np.add.at(n2, lag.element_nodes, np.einsum("eq,eqncij,eqncij->enc", w, S, S, optimize=True))
    if data is not None:
        # boundary term ((d_tt g1) tau + (d_tau g2) nu, theta)
        bnd = np.flatnonzero(mesh.boundary_facets)
        rule = sp_.dquad
        e = mesh.facet_elements[bnd, 0]
        x = sp_.facet_points(bnd, rule)
        _, _, T = boundary_values(sp_, bnd, data, rule)
        v0 = mesh.vertices[mesh.triangles[e, 0]]
        ref = np.einsum("eij,eqj->eqi", mesh.inv_jacobian[e], x - v0[:, None, :])
        phi = eval_basis(p, ref.reshape(-1, 2), 0, kind="lagrange").values
        phi = phi.reshape(len(bnd), -1, phi.shape[1])
        contrib = np.einsum("fq,fqc,fqn->fnc", sp_.facet_weights(bnd, rule), T, phi)
        np.add.at(r, lag.element_nodes[e], contrib)
    return r, np.sqrt(n2)


def symcurl_residual(H: DGField, p: int, data: BoundaryData | None = None,
                     lagrange: LagrangeSpace | None = None) -> Array:
    """Relative residuals ``(H, sym curl theta_k)`` for every vector Lagrange basis function.

    With inhomogeneous data the boundary term ``((d_tt g1) tau + (d_tau g2) nu, theta_k)``
    is added.  Entries are divided by ``||H|| ||sym curl theta_k||``; shape (n_nodes, 2).
    """
    lag = lagrange or LagrangeSpace(H.mesh, p)
    r, nrm = _symcurl_functional(H, p, data, lag)
    denom = np.sqrt(_l2_inner_tensor(H, H)) * nrm
    return np.where(denom > 0, np.abs(r) / np.where(denom > 0, denom, 1.0), 0.0)


def vertex_jump_functional(u_h: DGField, p: int, data: BoundaryData | None = None,
                           lagrange: LagrangeSpace | None = None) -> Array:
    """Vertex terms ``1/2 sum_F sum_z sign_{F,z} [[u_h]]_F(z) {div theta_k}_F(z)``.

    For the generalized Hessian of any ``u_h`` the symcurl residual equals
    this functional.  It vanishes for every ``theta`` whose gradient (equivalently,
    whose sym curl) is continuous at the mesh vertices.  Shape (n_nodes, 2).
    """
    from .mesh import LOCAL_EDGES
    from .space import REF_VERTICES

    mesh = u_h.mesh
    lag = lagrange or LagrangeSpace(mesh, p)
    uv = u_h.eval_at(np.arange(mesh.n_elements), REF_VERTICES, 0)[0]
    tg = eval_basis(p, REF_VERTICES, 1, kind="lagrange").grad  # (3, nloc, 2)
    fe, fl = mesh.facet_elements, mesh.facet_local
    inner = fe[:, 1] >= 0
    F_all = np.arange(mesh.n_facets)
    # local vertex indices of (start, end) in each adjacent element
    loc0 = LOCAL_EDGES[fl[:, 0]]
    loc1 = np.zeros_like(loc0)
    loc1[inner] = LOCAL_EDGES[fl[inner, 1]][:, ::-1]
    r = np.zeros((lag.n_nodes, 2))
    weight = np.where(inner, 0.5, 1.0)
    for end, sign in ((0, -1.0), (1, 1.0)):
        z = mesh.facets[:, end]
        ju = uv[fe[:, 0], loc0[:, end]].copy()
        ju[inner] -= uv[fe[inner, 1], loc1[inner, end]]
        if data is not None and (~inner).any():
            b = ~inner
            ju[b] -= data.g1(mesh.vertices[z[b]], mesh.facet_normal[b], mesh.facet_tangent[b])
        coef = 0.5 * sign * ju * weight
        for side, loc, sel in ((0, loc0, F_all), (1, loc1, np.flatnonzero(inner))):
            e = fe[sel, side]
            a = loc[sel, end]
            g = np.einsum("fai,fna->fni", mesh.inv_jacobian[e], tg[a])
            np.add.at(r, lag.element_nodes[e], coef[sel, None, None] * g)
    return r


@dataclass
class OrthogonalityReport:
    """Generalized-Hessian orthogonality against sym curl of vector Lagrange fields.

    ``full`` is the largest relative residual over the whole vector Lagrange
    basis.  ``vertex_continuous`` is the largest relative deviation from the
    vertex functional, i.e. the residual restricted to fields with continuous
    gradient at the vertices (the preimage of vertex-continuous tensors).
    """

    full: float
    vertex_continuous: float


def gh_orthogonality(u_h: DGField, H: DGField, data: BoundaryData | None = None,
                     lagrange: LagrangeSpace | None = None) -> OrthogonalityReport:
    p = u_h.space.p
    lag = lagrange or LagrangeSpace(u_h.mesh, p)
    r, nrm = _symcurl_functional(H, p, data, lag)
    v = vertex_jump_functional(u_h, p, data, lag)
    denom = np.sqrt(_l2_inner_tensor(H, H)) * nrm
    denom = np.where(denom > 0, denom, 1.0)
    return OrthogonalityReport(float(np.max(np.abs(r) / denom)),
                               float(np.max(np.abs(r - v) / denom)))


def vertex_gradient_constraints(mesh: Mesh, lag: LagrangeSpace) -> sp.csr_matrix:
    """Rows forcing the gradient of a vector Lagrange field to be single valued at vertices.

    Columns follow the flattened (n_nodes, 2) layout.  Intended for dense
    null-space checks on small meshes.
    """
    from .space import REF_VERTICES

    tg = eval_basis(lag.p, REF_VERTICES, 1, kind="lagrange").grad
    inc = mesh.vertex_element_incidence.T.tocsr()
    rows, cols, vals = [], [], []
    k = 0
    for z in range(mesh.n_vertices):
        els = inc.indices[inc.indptr[z]:inc.indptr[z + 1]]
        grads = []
        for e in els:
            a = int(np.flatnonzero(mesh.triangles[e] == z)[0])
            grads.append((e, tg[a] @ mesh.inv_jacobian[e]))
        e0, g0 = grads[0]
        for e, g in grads[1:]:
            for c in range(2):
                for i in range(2):
                    rows += [k] * (2 * g.shape[0])
                    cols += list(2 * lag.element_nodes[e] + c) + list(2 * lag.element_nodes[e0] + c)
                    vals += list(g[:, i]) + list(-g0[:, i])
                    k += 1
    return sp.csr_matrix((vals, (rows, cols)), shape=(k, 2 * lag.n_nodes))


# --- Green identity -------------------------------------------------------

def green_identity_residual(vertices: Array, B: Callable, grad_B: Callable, hess_B: Callable,
                            v: Callable, grad_v: Callable, hess_v: Callable,
                            degree: int = 16) -> float:
    """Relative residual of the div-div Green identity on one triangle.

    Checks ``(div div B, v) = (B, D^2 v) - sum_F sum_z sign (tau^T B nu)(z) v(z)
    - sum_F [(nu^T B nu, d_nu v)_F - (d_tau(tau^T B nu) + nu^T div B, v)_F]``
    with every term evaluated by quadrature.  ``B`` maps (n, 2) points to
    symmetric (n, 2, 2) tensors, ``grad_B`` to (n, 2, 2, 2) (last index is
    the derivative direction) and ``hess_B`` to (n, 2, 2, 2, 2).
    """
    V = np.asarray(vertices, dtype=float)
    if np.linalg.det(np.column_stack([V[1] - V[0], V[2] - V[0]])) < 0:
        V = V[[0, 2, 1]]
    q = quad_triangle(degree)
    J = np.column_stack([V[1] - V[0], V[2] - V[0]])
    x = V[0] + q.points @ J.T
    w = q.weights * abs(np.linalg.det(J))
    divdiv = np.einsum("nijij->n", hess_B(x))
    terms = [np.sum(w * np.einsum("nij,nij->n", B(x), hess_v(x)))]
    e = quad_edge(degree)
    for k in range(3):
        a, b = V[k], V[(k + 1) % 3]
        L = np.linalg.norm(b - a)
        t = (b - a) / L
        nu = np.array([t[1], -t[0]])
        xe = a + np.outer(e.points, b - a)
        we = e.weights * L
        gB = grad_B(xe)
        nn = np.einsum("i,nij,j->n", nu, B(xe), nu)
        dtn = np.einsum("i,nijk,j,k->n", t, gB, nu, t)
        ndiv = np.einsum("i,nijj->n", nu, gB)
        ends = np.array([a, b])
        tn_end = np.einsum("i,nij,j->n", t, B(ends), nu)
        terms.append(-(tn_end[1] * v(ends)[1] - tn_end[0] * v(ends)[0]))
        terms.append(-np.sum(we * nn * (grad_v(xe) @ nu)))
        terms.append(np.sum(we * (dtn + ndiv) * v(xe)))
    lhs = np.sum(w * divdiv * v(x))
    rhs = sum(terms)
    scale = max(abs(lhs), max(abs(t) for t in terms), 1e-300)
    return float(abs(lhs - rhs) / scale)


# --- pointwise differential operators on tensor fields ---------------------

def tensor_curl(A: DGField) -> Array:
    """Row-wise curl ``(curl A)_i = d_x A_i2 - d_y A_i1`` at volume quadrature points."""
    g = A.eval_volume(1)[1]  # (nel, nq, 2, 2, 2), last index = derivative
    return g[..., 1, 0] - g[..., 0, 1]


def tensor_divdiv(A: DGField) -> Array:
    """``div div A = sum_ij d_i d_j A_ij`` at volume quadrature points."""
    return np.einsum("eqijij->eq", A.eval_volume(2)[2])


# --- Galerkin property against interior C^1 bubbles -------------------------

def element_bubble(space: DGSpace, element: int, q: Callable[[Array], Array]) -> DGField:
    """``(l1 l2 l3)^2 q`` on one element, zero elsewhere, projected into ``space``.

    Exact (and in ``V_h`` intersected with ``H^2_0``) when ``deg q <= p - 6``.
    """
    mesh = space.mesh
    rule = space.vquad
    lam = np.column_stack([1 - rule.points.sum(axis=1), rule.points])
    x = mesh.to_physical(rule.points, [element])[0]
    vals = np.prod(lam, axis=1) ** 2 * np.asarray(q(x), dtype=float)
    coef = np.zeros((mesh.n_elements, space.nb))
    coef[element] = space.ref_mass_inv @ (space.vtable.values.T @ (rule.weights * vals))
    return DGField(space, coef)


def galerkin_bubble_residual(H: DGField, f: Fn | None, w: DGField) -> float:
    """``|(H, D^2 w) - (f, w)| / (||H|| ||D^2 w||)`` for a bubble ``w``."""
    D = broken_hessian(w)
    lhs = _l2_inner_tensor(H, D)
    rhs = 0.0
    if f is not None:
        x = w.space.quad_points()
        fx = np.asarray(f(x.reshape(-1, 2)), dtype=float).reshape(x.shape[:2])
        rhs = float(np.sum(w.space.quad_weights() * fx * w.eval_volume(0)[0]))
    denom = np.sqrt(_l2_inner_tensor(H, H) * _l2_inner_tensor(D, D))
    return float(abs(lhs - rhs) / denom) if denom > 0 else abs(lhs - rhs)
