"""Broken polynomial spaces on a mesh and fields living in them."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .mesh import LOCAL_EDGES, Mesh
from .polybasis import BasisTable, dimension, eval_basis, quad_edge, quad_triangle

REF_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
# ordered pairs of local vertices (start, end) -> table code
_PAIRS = [(a, b) for a in range(3) for b in range(3) if a != b]
PAIR_CODE = {pair: k for k, pair in enumerate(_PAIRS)}
DATA_QUAD_BOOST = 16


def push_forward(table: BasisTable, K: np.ndarray, order: int):
    """Physical derivatives of reference tables under affine maps.

    ``K`` is the inverse Jacobian, either (2, 2) or batched (n, 2, 2); table
    arrays are (nq, nb, ...) or batched (n, nq, nb, ...).  Returns the list
    ``[values, grad, hess, d3][:order + 1]``.
    """
    out = [table.values]
    if order >= 1:
        out.append(np.einsum("...ai,...qna->...qni", K, table.grad))
    if order >= 2:
        out.append(np.einsum("...ai,...bj,...qnab->...qnij", K, K, table.hess, optimize=True))
    if order >= 3:
        out.append(np.einsum("...ai,...bj,...ck,...qnabc->...qnijk", K, K, K, table.d3,
                             optimize=True))
    return out


def push_forward_field(ref: list[np.ndarray], K: np.ndarray) -> list[np.ndarray]:
    """Same as :func:`push_forward` for field derivatives (n, nq, *comp, 2, ...)."""
    out = [ref[0]]
    if len(ref) > 1:
        out.append(np.einsum("eai,eq...a->eq...i", K, ref[1]))
    if len(ref) > 2:
        out.append(np.einsum("eai,ebj,eq...ab->eq...ij", K, K, ref[2], optimize=True))
    if len(ref) > 3:
        out.append(np.einsum("eai,ebj,eck,eq...abc->eq...ijk", K, K, K, ref[3], optimize=True))
    return out


def _gather(table: BasisTable, idx) -> BasisTable:
    return BasisTable(table.degree, table.values[idx],
                      None if table.grad is None else table.grad[idx],
                      None if table.hess is None else table.hess[idx],
                      None if table.d3 is None else table.d3[idx])


class DGSpace:
    """Scalar discontinuous space of degree p with an orthonormal basis per element.

    Degrees of freedom of element ``e`` are ``e * nb + arange(nb)``.
    """

    def __init__(self, mesh: Mesh, p: int, quad_degree: int | None = None,
                 data_quad_degree: int | None = None):
        if p < 0:
            raise ValueError("degree must be non-negative")
        self.mesh = mesh
        self.p = p
        self.nb = dimension(p)
        self.quad_degree = 2 * p + 4 if quad_degree is None else quad_degree
        # boundary data is not polynomial: integrate it more accurately
        self.data_quad_degree = (self.quad_degree + DATA_QUAD_BOOST if data_quad_degree is None
                                 else data_quad_degree)
        if self.quad_degree < 2 * p:
            raise ValueError(f"quadrature degree {self.quad_degree} < 2p = {2 * p}: "
                             "mass and penalty terms would be under-integrated")

    @property
    def ndof(self) -> int:
        return self.mesh.n_elements * self.nb

    # -- volume -----------------------------------------------------------
    @cached_property
    def vquad(self):
        return quad_triangle(self.quad_degree)

    @cached_property
    def vtable(self) -> BasisTable:
        return eval_basis(self.p, self.vquad.points, 3)

    @cached_property
    def ref_mass(self) -> np.ndarray:
        t, w = self.vtable.values, self.vquad.weights
        return (t * w[:, None]).T @ t

    @cached_property
    def ref_mass_inv(self) -> np.ndarray:
        return np.linalg.inv(self.ref_mass)

    def quad_points(self, elements=None) -> np.ndarray:
        return self.mesh.to_physical(self.vquad.points, elements)

    def quad_weights(self, elements=None) -> np.ndarray:
        """Physical weights, (nel, nq)."""
        det = self.mesh.det_jacobian if elements is None else self.mesh.det_jacobian[elements]
        return np.abs(det)[:, None] * self.vquad.weights[None, :]

    # -- facets -----------------------------------------------------------
    @cached_property
    def fquad(self):
        return quad_edge(self.quad_degree)

    @cached_property
    def dquad(self):
        return quad_edge(self.data_quad_degree)

    def _edge_tables(self, rule, dtype=float) -> BasisTable:
        key = (rule.degree, np.dtype(dtype).str)
        cache = self.__dict__.setdefault("_edge_cache", {})
        if key not in cache:
            s = rule.points.astype(dtype)
            tabs = []
            for a, b in _PAIRS:
                pts = np.outer(1 - s, REF_VERTICES[a]) + np.outer(s, REF_VERTICES[b])
                tabs.append(eval_basis(self.p, pts, 3, dtype=dtype))
            cache[key] = BasisTable(self.p, *(np.stack([getattr(t, n) for t in tabs])
                                              for n in ("values", "grad", "hess", "d3")))
        return cache[key]

    @property
    def ftables(self) -> BasisTable:
        """Tables for the 6 oriented edge placements, arrays (6, nq, nb, ...)."""
        return self._edge_tables(self.fquad)

    @cached_property
    def facet_codes(self) -> np.ndarray:
        """Table code of each (facet, side); -1 for the missing side of boundary facets."""
        m = self.mesh
        codes = np.full((m.n_facets, 2), -1, dtype=np.int64)
        lookup = np.full((3, 3), -1, dtype=np.int64)
        for (a, b), k in PAIR_CODE.items():
            lookup[a, b] = k
        l0 = m.facet_local[:, 0]
        codes[:, 0] = lookup[LOCAL_EDGES[l0, 0], LOCAL_EDGES[l0, 1]]
        inner = m.facet_local[:, 1] >= 0
        l1 = m.facet_local[inner, 1]
        codes[inner, 1] = lookup[LOCAL_EDGES[l1, 1], LOCAL_EDGES[l1, 0]]
        return codes

    def facet_points(self, facets, rule=None) -> np.ndarray:
        m = self.mesh
        F = m.facets[facets]
        a, b = m.vertices[F[:, 0]], m.vertices[F[:, 1]]
        s = (rule or self.fquad).points
        return a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]

    def facet_weights(self, facets, rule=None) -> np.ndarray:
        return self.mesh.facet_h[facets][:, None] * (rule or self.fquad).weights[None, :]

    def facet_basis(self, facets, side: int, order: int, rule=None, dtype=float):
        """Physical basis derivatives on one side of the given facets."""
        codes = self.facet_codes[facets, side]
        els = self.mesh.facet_elements[facets, side]
        tables = self._edge_tables(rule or self.fquad, dtype)
        return push_forward(_gather(tables, codes), self.mesh.inv_jacobian[els], order)

    def element_dofs(self, elements) -> np.ndarray:
        return np.asarray(elements)[:, None] * self.nb + np.arange(self.nb)[None, :]


@dataclass
class DGField:
    """Element-wise polynomial field.

    ``coef`` has shape (nel, nb) for scalars, (nel, nb, 2) for vectors and
    (nel, nb, 2, 2) for tensors.
    """

    space: DGSpace
    coef: np.ndarray

    def __post_init__(self):
        self.coef = np.asarray(self.coef, dtype=float)
        if self.coef.shape[:2] != (self.space.mesh.n_elements, self.space.nb):
            raise ValueError(f"coefficient block shape {self.coef.shape[:2]} does not match "
                             f"{(self.space.mesh.n_elements, self.space.nb)}")
        if self.coef.shape[2:] not in ((), (2,), (2, 2)):
            raise ValueError("rank must be scalar, 2-vector or 2x2 tensor")

    @classmethod
    def from_vector(cls, space: DGSpace, x: np.ndarray) -> "DGField":
        return cls(space, np.asarray(x).reshape(space.mesh.n_elements, space.nb))

    @property
    def mesh(self) -> Mesh:
        return self.space.mesh

    @property
    def degree(self) -> int:
        return self.space.p

    @property
    def comp_shape(self) -> tuple[int, ...]:
        return self.coef.shape[2:]

    def vector(self) -> np.ndarray:
        return self.coef.reshape(-1)

    def eval_volume(self, order: int = 0, elements=None):
        """Physical derivatives at volume quadrature points: list of (nel, nq, *comp, 2...)."""
        sp_ = self.space
        els = np.arange(self.mesh.n_elements) if elements is None else np.asarray(elements)
        c = self.coef[els]
        t = sp_.vtable
        ref = [_contract(t.values, c)]
        for arr in (t.grad, t.hess, t.d3)[:order]:
            ref.append(_contract(arr, c))
        return push_forward_field(ref, self.mesh.inv_jacobian[els])

    def eval_facets(self, facets, side: int, order: int = 0):
        """Physical derivatives on one side of the given facets: list of (nf, nq, *comp, 2...)."""
        sp_ = self.space
        codes = sp_.facet_codes[facets, side]
        els = self.mesh.facet_elements[facets, side]
        c = self.coef[els]
        t = sp_.ftables
        ref = [_contract_batched(t.values[codes], c)]
        for arr in (t.grad, t.hess, t.d3)[:order]:
            ref.append(_contract_batched(arr[codes], c))
        return push_forward_field(ref, self.mesh.inv_jacobian[els])

    def eval_at(self, elements, ref_points, order: int = 0):
        """Derivatives at arbitrary reference points of the given elements."""
        els = np.asarray(elements)
        t = eval_basis(self.space.p, ref_points, order)
        c = self.coef[els]
        ref = [_contract(t.values, c)]
        for arr in (t.grad, t.hess, t.d3)[:order]:
            ref.append(_contract(arr, c))
        return push_forward_field(ref, self.mesh.inv_jacobian[els])


def _contract(arr: np.ndarray, c: np.ndarray) -> np.ndarray:
    """arr (nq, nb, *deriv), c (nel, nb, *comp) -> (nel, nq, *comp, *deriv)."""
    nq, nb = arr.shape[:2]
    dshape = arr.shape[2:]
    nel = c.shape[0]
    cshape = c.shape[2:]
    a2 = arr.reshape(nq, nb, -1)
    c2 = c.reshape(nel, nb, -1)
    out = np.einsum("qnd,enc->eqcd", a2, c2, optimize=True)
    return out.reshape((nel, nq) + cshape + dshape)


def _contract_batched(arr: np.ndarray, c: np.ndarray) -> np.ndarray:
    """arr (nel, nq, nb, *deriv), c (nel, nb, *comp) -> (nel, nq, *comp, *deriv)."""
    nel, nq, nb = arr.shape[:3]
    dshape = arr.shape[3:]
    cshape = c.shape[2:]
    a2 = arr.reshape(nel, nq, nb, -1)
    c2 = c.reshape(nel, nb, -1)
    out = np.einsum("eqnd,enc->eqcd", a2, c2, optimize=True)
    return out.reshape((nel, nq) + cshape + dshape)
