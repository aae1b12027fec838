"""Conforming triangle meshes with facet topology and refinement.

Triangles are stored counterclockwise and rotated so that their
newest-vertex-bisection refinement edge is the edge ``(t[0], t[1])``; the
newest vertex is ``t[2]``.  Local edge ``k`` is the edge opposite local
vertex ``k``.

Facet orientation: the fixed normal of an interior facet points out of the
adjacent element with the lower id; on the boundary it points outward.  The
facet tangent is the normal rotated by +90 degrees, and facet vertices are
stored as ``(start, end)`` so that ``end - start`` is parallel to the
tangent.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class MeshError(ValueError):
    pass


class StructuralError(MeshError):
    """Non-conforming or otherwise corrupt connectivity."""


class GeometryError(MeshError):
    """Degenerate element geometry."""


# local edge k -> (start, end) local vertices, counterclockwise traversal
LOCAL_EDGES = np.array([[1, 2], [2, 0], [0, 1]])


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    parent: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_elements(self) -> int:
        return len(self.triangles)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_facets(self) -> int:
        return len(self.facets)

    # -- element geometry -------------------------------------------------
    @cached_property
    def jacobian(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=-1)

    @cached_property
    def det_jacobian(self) -> np.ndarray:
        J = self.jacobian
        return J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]

    @cached_property
    def inv_jacobian(self) -> np.ndarray:
        return np.linalg.inv(self.jacobian)

    @cached_property
    def area(self) -> np.ndarray:
        return 0.5 * self.det_jacobian

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        e = v[:, LOCAL_EDGES[:, 1]] - v[:, LOCAL_EDGES[:, 0]]
        return np.linalg.norm(e, axis=-1)

    @cached_property
    def h(self) -> np.ndarray:
        """Element diameters h_T."""
        return self.edge_lengths.max(axis=1)

    @cached_property
    def rho(self) -> np.ndarray:
        """Inradii, area / semiperimeter."""
        return self.area / (0.5 * self.edge_lengths.sum(axis=1))

    @property
    def gamma(self) -> float:
        """Shape-regularity constant max h_T / rho_T."""
        return float(np.max(self.h / self.rho))

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    def to_physical(self, ref_points: np.ndarray, elements=None) -> np.ndarray:
        """Map reference points to every element (or the given ones): (nel, npts, 2)."""
        els = slice(None) if elements is None else elements
        x0 = self.vertices[self.triangles[els, 0]]
        return x0[:, None, :] + np.einsum("eij,qj->eqi", self.jacobian[els], ref_points)

    # -- topology ---------------------------------------------------------
    @cached_property
    def _topology(self):
        tri = self.triangles
        nt = len(tri)
        a = tri[:, LOCAL_EDGES[:, 0]].ravel()
        b = tri[:, LOCAL_EDGES[:, 1]].ravel()
        key = np.minimum(a, b).astype(np.int64) * self.n_vertices + np.maximum(a, b)
        uniq, inv, counts = np.unique(key, return_inverse=True, return_counts=True)
        if np.any(counts > 2):
            raise StructuralError("an edge is shared by more than two triangles")
        nf = len(uniq)
        elem_facets = inv.reshape(nt, 3)
        owner = np.full((nf, 2), -1, dtype=np.int64)
        local = np.full((nf, 2), -1, dtype=np.int64)
        order = np.argsort(inv, kind="stable")  # element ids ascending within each facet
        el = order // 3
        loc = order % 3
        first = np.ones(len(order), dtype=bool)
        first[1:] = inv[order][1:] != inv[order][:-1]
        f = inv[order]
        owner[f[first], 0] = el[first]
        local[f[first], 0] = loc[first]
        owner[f[~first], 1] = el[~first]
        local[f[~first], 1] = loc[~first]
        # vertices of each facet in the counterclockwise order of its owner
        e0, l0 = owner[:, 0], local[:, 0]
        start = tri[e0, LOCAL_EDGES[l0, 0]]
        end = tri[e0, LOCAL_EDGES[l0, 1]]
        facets = np.column_stack([start, end])
        d = self.vertices[end] - self.vertices[start]
        hF = np.linalg.norm(d, axis=1)
        tangent = d / hF[:, None]
        normal = np.column_stack([tangent[:, 1], -tangent[:, 0]])
        return facets, owner, local, elem_facets, hF, normal, tangent

    @property
    def facets(self) -> np.ndarray:
        """Facet vertex pairs ``(start, end)``."""
        return self._topology[0]

    @property
    def facet_elements(self) -> np.ndarray:
        """Adjacent elements ``(owner, neighbour)``; neighbour is -1 on the boundary."""
        return self._topology[1]

    @property
    def facet_local(self) -> np.ndarray:
        """Local edge index of the facet in each adjacent element (-1 if absent)."""
        return self._topology[2]

    @property
    def element_facets(self) -> np.ndarray:
        """Facet id of local edge k of each element, shape (nel, 3)."""
        return self._topology[3]

    @property
    def facet_h(self) -> np.ndarray:
        return self._topology[4]

    @property
    def facet_normal(self) -> np.ndarray:
        return self._topology[5]

    @property
    def facet_tangent(self) -> np.ndarray:
        return self._topology[6]

    @cached_property
    def boundary_facets(self) -> np.ndarray:
        return self.facet_elements[:, 1] < 0

    @cached_property
    def element_facet_sign(self) -> np.ndarray:
        """nu_F . nu_T for each local edge of each element (+1 owner, -1 neighbour)."""
        fe = self.facet_elements[self.element_facets]
        return np.where(fe[..., 0] == np.arange(self.n_elements)[:, None], 1.0, -1.0)

    @property
    def facet_vertex_sign(self) -> np.ndarray:
        """sign_{F, nu}: -1 at the start vertex, +1 at the end vertex."""
        return np.tile([-1.0, 1.0], (self.n_facets, 1))

    @cached_property
    def vertex_element_incidence(self) -> sp.csr_matrix:
        nt = self.n_elements
        rows = np.repeat(np.arange(nt), 3)
        return sp.csr_matrix((np.ones(3 * nt), (rows, self.triangles.ravel())),
                             shape=(nt, self.n_vertices))

    @cached_property
    def element_adjacency(self) -> sp.csr_matrix:
        """Elements sharing at least one vertex (patch omega^T)."""
        inc = self.vertex_element_incidence
        return (inc @ inc.T).tocsr()

    @property
    def refinement_edge(self) -> np.ndarray:
        return self.triangles[:, :2]

    def check_conforming(self) -> None:
        _check_hanging(self)


@dataclass(frozen=True)
class Patch:
    """Element sets around an element or a facet.

    For an element: ``omega`` is omega^T and ``omega_tilde`` the element itself.
    For a facet: ``omega`` is omega_F and ``omega_tilde`` the elements
    containing the facet.
    """

    kind: str
    index: int
    omega: tuple[int, ...]
    omega_tilde: tuple[int, ...]


def patches(mesh: Mesh, element: int | None = None, facet: int | None = None) -> Patch:
    if (element is None) == (facet is None):
        raise ValueError("give exactly one of element= or facet=")
    adj = mesh.element_adjacency
    if element is not None:
        if not 0 <= element < mesh.n_elements:
            raise IndexError(f"unknown element {element}")
        om = adj.indices[adj.indptr[element]:adj.indptr[element + 1]]
        return Patch("element", element, tuple(sorted(int(i) for i in om)), (element,))
    if not 0 <= facet < mesh.n_facets:
        raise IndexError(f"unknown facet {facet}")
    tilde = [int(e) for e in mesh.facet_elements[facet] if e >= 0]
    om = set()
    for e in tilde:
        om.update(int(i) for i in adj.indices[adj.indptr[e]:adj.indptr[e + 1]])
    return Patch("facet", facet, tuple(sorted(om)), tuple(sorted(tilde)))


def _check_hanging(mesh: Mesh) -> None:
    bf = np.flatnonzero(mesh.boundary_facets)
    if len(bf) == 0:
        return
    seg = mesh.facets[bf]
    cand = np.unique(seg)
    P = mesh.vertices[cand]
    A = mesh.vertices[seg[:, 0]]
    B = mesh.vertices[seg[:, 1]]
    d = B - A
    L2 = np.einsum("ij,ij->i", d, d)
    # chunk over facets to bound memory
    for s in range(0, len(bf), 512):
        a, dd, l2 = A[s:s + 512], d[s:s + 512], L2[s:s + 512]
        w = P[None, :, :] - a[:, None, :]
        t = np.einsum("fpi,fi->fp", w, dd) / l2[:, None]
        cross = w[..., 0] * dd[:, None, 1] - w[..., 1] * dd[:, None, 0]
        tol = 1e-12 * l2[:, None]
        hit = (np.abs(cross) <= tol) & (t > 1e-12) & (t < 1 - 1e-12)
        if np.any(hit):
            f, v = np.argwhere(hit)[0]
            raise StructuralError(
                f"hanging vertex {cand[v]} on facet {tuple(seg[s + f])}")


def _orient_refinement_edge(vertices: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Rotate each triangle so its longest edge is (t0, t1); ties -> smallest opposite vertex."""
    v = vertices[tri]
    lens = np.linalg.norm(v[:, LOCAL_EDGES[:, 1]] - v[:, LOCAL_EDGES[:, 0]], axis=-1)
    longest = lens.max(axis=1, keepdims=True)
    is_long = lens >= longest * (1 - 1e-12)
    # edge k is opposite vertex k; prefer the smallest opposite global vertex index
    opp = np.where(is_long, tri, np.iinfo(tri.dtype).max)
    k = np.argmin(opp, axis=1)
    # rotate so that vertex k becomes local vertex 2
    shift = (k + 1) % 3
    idx = (np.arange(3)[None, :] + shift[:, None]) % 3
    return np.take_along_axis(tri, idx, axis=1)


def build_mesh(vertices, triangles, *, init_refinement_edge: bool = True,
               parent=None, check: bool = True) -> Mesh:
    """Construct a mesh with full facet topology.

    Clockwise triangles are reoriented.  Raises :class:`GeometryError` for
    zero-area triangles and :class:`StructuralError` for invalid indices or
    hanging vertices.
    """
    V = np.ascontiguousarray(vertices, dtype=float)
    T = np.array(triangles, dtype=np.int64).reshape(-1, 3)
    if V.ndim != 2 or V.shape[1] != 2:
        raise StructuralError("vertices must have shape (n, 2)")
    if T.size and (T.min() < 0 or T.max() >= len(V)):
        raise StructuralError("triangle index out of range")
    if np.any((T[:, 0] == T[:, 1]) | (T[:, 1] == T[:, 2]) | (T[:, 0] == T[:, 2])):
        raise GeometryError("triangle with repeated vertex")
    v = V[T]
    cross = ((v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1])
             - (v[:, 1, 1] - v[:, 0, 1]) * (v[:, 2, 0] - v[:, 0, 0]))
    scale = np.max(np.linalg.norm(v - v[:, :1], axis=-1), axis=1) ** 2
    if np.any(np.abs(cross) <= 1e-13 * scale):
        raise GeometryError(f"degenerate triangle {int(np.argmin(np.abs(cross)))}")
    cw = cross < 0
    T[cw] = T[cw][:, [0, 2, 1]]
    if init_refinement_edge:
        T = _orient_refinement_edge(V, T)
    mesh = Mesh(V, T, None if parent is None else np.asarray(parent))
    mesh._topology  # noqa: B018 - validates edge multiplicity
    if check:
        _check_hanging(mesh)
    return mesh


# -- built-in meshes -------------------------------------------------------
def unit_square() -> Mesh:
    return build_mesh([[0, 0], [1, 0], [1, 1], [0, 1]], [[0, 1, 2], [0, 2, 3]])


def lshape() -> Mesh:
    """(-1,1)^2 minus [0,1)x(-1,0], six triangles sharing the reentrant corner."""
    V = [[0, 0], [1, 0], [1, 1], [0, 1], [-1, 1], [-1, 0], [-1, -1], [0, -1]]
    T = [[0, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 5], [0, 5, 6], [0, 6, 7]]
    return build_mesh(V, T)


# -- refinement ------------------------------------------------------------
def _edge_midpoints(mesh: Mesh):
    """Midpoint vertex ids for every facet, appended after the existing vertices."""
    F = mesh.facets
    mid = 0.5 * (mesh.vertices[F[:, 0]] + mesh.vertices[F[:, 1]])
    ids = mesh.n_vertices + np.arange(len(F))
    return np.vstack([mesh.vertices, mid]), ids


def uniform_refine(mesh: Mesh) -> Mesh:
    """Red refinement: every triangle into four similar children."""
    V, mids = _edge_midpoints(mesh)
    t = mesh.triangles
    m = mids[mesh.element_facets]  # midpoint of local edge k (opposite vertex k)
    a, b, c = t[:, 0], t[:, 1], t[:, 2]
    mab, mbc, mca = m[:, 2], m[:, 0], m[:, 1]
    children = np.stack([
        np.column_stack([a, mab, mca]),
        np.column_stack([mab, b, mbc]),
        np.column_stack([mca, mbc, c]),
        np.column_stack([mbc, mca, mab]),
    ], axis=1).reshape(-1, 3)
    parent = np.repeat(np.arange(mesh.n_elements), 4)
    return build_mesh(V, children, parent=parent, check=False)


def refine_hct(mesh: Mesh) -> Mesh:
    """Split every triangle into three by joining its vertices to the centroid."""
    nv = mesh.n_vertices
    V = np.vstack([mesh.vertices, mesh.centroids])
    g = nv + np.arange(mesh.n_elements)
    t = mesh.triangles
    children = np.stack([
        np.column_stack([t[:, 0], t[:, 1], g]),
        np.column_stack([t[:, 1], t[:, 2], g]),
        np.column_stack([t[:, 2], t[:, 0], g]),
    ], axis=1).reshape(-1, 3)
    parent = np.repeat(np.arange(mesh.n_elements), 3)
    return build_mesh(V, children, parent=parent, check=False)


def refine_nvb(mesh: Mesh, marked) -> Mesh:
    """Newest vertex bisection of the marked elements plus conforming closure."""
    marked = np.unique(np.asarray(list(marked) if not isinstance(marked, np.ndarray) else marked,
                                  dtype=np.int64))
    if marked.size and (marked.min() < 0 or marked.max() >= mesh.n_elements):
        raise IndexError("marked element id out of range")
    if marked.size == 0:
        return mesh

    ef = mesh.element_facets
    ref_local = 2  # refinement edge (t0, t1) is local edge 2
    edge_marked = np.zeros(mesh.n_facets, dtype=bool)
    edge_marked[ef[marked, ref_local]] = True
    # closure: any element with a marked edge must bisect its refinement edge
    while True:
        need = edge_marked[ef].any(axis=1) & ~edge_marked[ef[:, ref_local]]
        if not need.any():
            break
        edge_marked[ef[need, ref_local]] = True

    F = mesh.facets
    new_ids = np.full(mesh.n_facets, -1, dtype=np.int64)
    me = np.flatnonzero(edge_marked)
    new_ids[me] = mesh.n_vertices + np.arange(len(me))
    V = np.vstack([mesh.vertices, 0.5 * (mesh.vertices[F[me, 0]] + mesh.vertices[F[me, 1]])])
    mid = {}
    for f in me:
        s, e = F[f]
        mid[(min(s, e), max(s, e))] = int(new_ids[f])

    out, parent = [], []

    def bisect(tri, par):
        a, b, c = tri
        key = (min(a, b), max(a, b))
        m = mid.get(key)
        if m is None:
            out.append(tri)
            parent.append(par)
            return
        bisect((c, a, m), par)
        bisect((b, c, m), par)

    refined = edge_marked[ef].any(axis=1)
    tris = mesh.triangles
    for e in range(mesh.n_elements):
        if refined[e]:
            bisect(tuple(int(v) for v in tris[e]), e)
        else:
            out.append(tuple(tris[e]))
            parent.append(e)
    return build_mesh(V, np.array(out), init_refinement_edge=False, parent=np.array(parent),
                      check=False)


def uniform_bisect(mesh: Mesh, sweeps: int = 2) -> Mesh:
    """Bisect every element ``sweeps`` times; two sweeps halve h like red refinement."""
    for _ in range(sweeps):
        mesh = refine_nvb(mesh, np.arange(mesh.n_elements))
    return mesh


# -- plain-text I/O --------------------------------------------------------
def write_mesh(mesh: Mesh, path) -> None:
    lines = [str(mesh.n_vertices)]
    lines += [f"{x:.17g} {y:.17g}" for x, y in mesh.vertices]
    lines.append(str(mesh.n_elements))
    lines += [f"{a} {b} {c}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path, *, init_refinement_edge: bool = True) -> Mesh:
    tokens = Path(path).read_text().split()
    nv = int(tokens[0])
    V = np.array(tokens[1:1 + 2 * nv], dtype=float).reshape(nv, 2)
    nt = int(tokens[1 + 2 * nv])
    T = np.array(tokens[2 + 2 * nv:2 + 2 * nv + 3 * nt], dtype=np.int64).reshape(nt, 3)
    return build_mesh(V, T, init_refinement_edge=init_refinement_edge)
