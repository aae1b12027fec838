"""Sparse symmetric storage and a linear solver for the IPDG system."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

DEFAULT_MAX_DIRECT = 40_000_000
RESIDUAL_TOL = 1e-10
MAX_REFINEMENT_STEPS = 6


class SolverError(RuntimeError):
    """The solver could not produce a solution meeting the residual tolerance."""


class IndefiniteError(SolverError):
    """A non-positive pivot appeared during the symmetric factorization."""

    def __init__(self, pivot: int, value: float):
        super().__init__(f"non-positive pivot {value:.3e} at index {pivot}: matrix is not SPD")
        self.pivot = pivot
        self.value = value


@dataclass(frozen=True)
class SparseSym:
    """Symmetric matrix in compressed row storage (full pattern stored).

    ``precise`` optionally holds the same matrix in extended precision;
    ``matrix`` is then its rounding to double and residuals of iterative
    refinement are computed with ``precise``.
    """

    matrix: sp.csr_matrix
    precise: sp.csr_matrix | None = None

    def __post_init__(self):
        m = self.matrix
        if m.shape[0] != m.shape[1]:
            raise ValueError("matrix must be square")

    @classmethod
    def from_upper(cls, rows, cols, vals, n: int, dtype=float) -> "SparseSym":
        """Assemble from COO triples, keeping only the upper triangle (row <= col).

        Only one triangle is ever summed, so the mirrored result is
        symmetric bit for bit.
        """
        rows = np.asarray(rows)
        cols = np.asarray(cols)
        vals = np.asarray(vals, dtype=dtype)
        keep = rows <= cols
        upper = sp.coo_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, n)).tocsr()
        upper.sum_duplicates()
        diag = sp.diags(upper.diagonal())
        full = (upper + upper.T - diag).tocsr()
        full.sort_indices()
        return cls(full)

    @classmethod
    def with_precise(cls, precise: sp.csr_matrix) -> "SparseSym":
        precise = precise.tocsr()
        precise.sort_indices()
        return cls(precise.astype(float), precise)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def indptr(self) -> np.ndarray:
        return self.matrix.indptr

    @property
    def indices(self) -> np.ndarray:
        return self.matrix.indices

    @property
    def data(self) -> np.ndarray:
        return self.matrix.data

    def __matmul__(self, x):
        return self.matrix @ x

    def asymmetry(self) -> float:
        """max |A - A^T|."""
        d = self.matrix - self.matrix.T
        return float(np.abs(d.data).max()) if d.nnz else 0.0

    def block_diagonal_inverse(self, block: int) -> sp.csr_matrix:
        n = self.n
        if n % block:
            raise ValueError("block size does not divide the dimension")
        nbl = n // block
        idx = np.arange(n).reshape(nbl, block)
        coo = self.matrix.tocoo()
        inside = coo.row // block == coo.col // block
        blocks = np.zeros((nbl, block, block))
        r, c = coo.row[inside], coo.col[inside]
        blocks[r // block, r % block, c % block] = coo.data[inside]
        inv = np.linalg.inv(blocks)
        r = np.repeat(idx, block, axis=1).ravel()
        c = np.tile(idx, (1, block)).ravel()
        return sp.csr_matrix((inv.ravel(), (r, c)), shape=(n, n))


def _check_residual(A: SparseSym, x: np.ndarray, b: np.ndarray) -> float:
    """Normwise backward error ``|b - A x| / (|A| |x| + |b|)`` in the infinity norm."""
    r = np.abs(A @ x - b).max()
    scale = abs(A.matrix).sum(axis=1).max() * np.abs(x).max() + np.abs(b).max()
    return float(r / scale) if scale > 0 else float(r)


def solve(A: SparseSym, b: np.ndarray, *, max_direct: int = DEFAULT_MAX_DIRECT,
          block: int | None = None, tol: float = RESIDUAL_TOL) -> np.ndarray:
    """Solve ``A x = b`` for symmetric positive definite ``A``.

    A symmetric-mode sparse LU without pivoting (equivalent to an LDL^T
    factorization with a fill-reducing ordering, computed on the block graph
    when ``block`` is given) is used up to ``max_direct`` stored nonzeros;
    larger systems use conjugate gradients preconditioned by the element
    block diagonal (block size ``block``).  When ``A.precise`` is present,
    the direct solution is refined with residuals in extended precision.

    Raises
    ------
    IndefiniteError
        A pivot is not positive.
    SolverError
        The normwise backward error exceeds ``tol``.
    """
    b = np.asarray(b)
    if b.shape != (A.n,):
        raise ValueError(f"right-hand side has shape {b.shape}, expected ({A.n},)")
    b64 = b.astype(float)
    if not np.any(b64):
        return np.zeros_like(b64)
    if A.matrix.nnz <= max_direct:
        x = _solve_direct(A, b, tol, block)
    else:
        x = _solve_cg(A, b64, block or 1, tol)
    res = _check_residual(A, x, b64)
    if res > tol:
        raise SolverError(f"backward error {res:.3e} exceeds {tol:.1e}")
    return x


def block_ordering(A: SparseSym, block: int) -> np.ndarray:
    """Fill-reducing symmetric permutation computed on the block (element) graph.

    Minimum degree on the quotient graph is much cheaper than on the full
    pattern and yields comparable fill for DG matrices.
    """
    n = A.n
    if n % block:
        raise ValueError("block size does not divide the dimension")
    nbl = n // block
    P = sp.csr_matrix((np.ones(n), (np.arange(n), np.arange(n) // block)), shape=(n, nbl))
    G = (P.T @ abs(A.matrix) @ P).tocsc()
    G = G + sp.identity(nbl, format="csc") * (10 * G.max())
    lu = spla.splu(G, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                   options={"SymmetricMode": True})
    order = np.argsort(lu.perm_c)
    return (order[:, None] * block + np.arange(block)).ravel()


def _solve_direct(A: SparseSym, b: np.ndarray, tol: float, block: int | None) -> np.ndarray:
    if block and block > 1 and A.n > block:
        perm = block_ordering(A, block)
        M = A.matrix[perm][:, perm].tocsc()
        spec = "NATURAL"
    else:
        perm = np.arange(A.n)
        M = A.matrix.tocsc()
        spec = "MMD_AT_PLUS_A"
    try:
        lu = spla.splu(M, permc_spec=spec, diag_pivot_thresh=0.0,
                       options={"SymmetricMode": True})
    except RuntimeError as exc:  # exactly singular pivot
        raise IndefiniteError(-1, 0.0) from exc
    piv = lu.U.diagonal()
    bad = np.flatnonzero(~(piv > 0))
    if bad.size:
        k = int(bad[0])
        col = int(lu.perm_c[k]) if k < lu.perm_c.size else k
        raise IndefiniteError(int(perm[col]), float(piv[k]))
    b64 = b.astype(float)
    x = np.empty_like(b64)
    x[perm] = lu.solve(b64[perm])
    if A.precise is not None:
        return _refine_extended(A, b, x, lambda r: lu.solve(r[perm]), perm)
    if _check_residual(A, x, b64) > tol:
        x[perm] += lu.solve((b64 - A @ x)[perm])
    return x


def _refine_extended(A: SparseSym, b: np.ndarray, x: np.ndarray, inner, perm) -> np.ndarray:
    """Iterative refinement with residuals in the precision of ``A.precise``."""
    dt = A.precise.dtype
    bx = b.astype(dt)
    xx = x.astype(dt)
    scale = abs(A.precise).sum(axis=1).max()
    best = np.inf
    for _ in range(MAX_REFINEMENT_STEPS):
        r = bx - A.precise @ xx
        err = float(np.abs(r).max() / (scale * np.abs(xx).max() + np.abs(bx).max()))
        if err > 0.5 * best:
            break
        best = err
        d = np.empty(A.n)
        d[perm] = inner(r.astype(float))
        xx += d
    return xx.astype(float)


def _solve_cg(A: SparseSym, b: np.ndarray, block: int, tol: float) -> np.ndarray:
    P = A.block_diagonal_inverse(block)
    x, info = spla.cg(A.matrix, b, rtol=tol * 1e-2, atol=0.0, M=P, maxiter=20 * A.n)
    if info < 0:
        raise SolverError("conjugate gradients broke down")
    return x
