"""Doerfler marking and the SOLVE, ESTIMATE, MARK, REFINE loop."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .analysis import RunRecord, discrete_solve, evaluate, fill_eoc
from .forms import PenaltyConfig
from .linalg import SolverError
from .mesh import Mesh, refine_nvb

ESTIMATORS = ("eta", "gimel")


@dataclass(frozen=True)
class AdaptConfig:
    """Parameters of an adaptive run."""

    p: int = 2
    estimator: str = "eta"
    theta: float = 0.5
    max_levels: int = 20
    max_dofs: int = 50_000
    penalties: PenaltyConfig | None = None
    quad_boost: int = 0

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise ValueError(f"marking parameter must lie in (0, 1), got {self.theta}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        if self.p < 2:
            raise ValueError("polynomial degree must be at least 2")
        if self.max_levels < 1 or self.max_dofs < 1:
            raise ValueError("level and dof caps must be positive")


class AdaptError(SolverError):
    """Solver failure inside the adaptive loop, tagged with the iteration."""

    def __init__(self, iteration: int, cause: Exception):
        super().__init__(f"iteration {iteration}: {cause}")
        self.iteration = iteration


def doerfler_mark(indicators_sq, theta: float) -> np.ndarray:
    """Greedy Doerfler marking.

    Parameters
    ----------
    indicators_sq : array_like
        Squared element indicators (non-negative).
    theta : float
        Bulk parameter in (0, 1).

    Returns
    -------
    numpy.ndarray
        Element ids of the shortest prefix of the descending order (ties by
        ascending id) whose indicators sum to at least ``theta`` times the
        total.  Empty if all indicators vanish.
    """
    eta2 = np.asarray(indicators_sq, dtype=float)
    if np.any(eta2 < 0) or not np.all(np.isfinite(eta2)):
        raise ValueError("indicators must be finite and non-negative")
    if not 0.0 < theta < 1.0:
        raise ValueError(f"marking parameter must lie in (0, 1), got {theta}")
    total = eta2.sum()
    if total == 0.0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(eta2.size), -eta2))
    csum = np.cumsum(eta2[order])
    k = int(np.searchsorted(csum, theta * total, side="left")) + 1
    return np.sort(order[:min(k, eta2.size)])


def corner_diameter(mesh: Mesh, point) -> float:
    """Largest diameter of the elements touching ``point``."""
    hit = np.all(np.isclose(mesh.vertices[mesh.triangles], np.asarray(point)), axis=-1).any(axis=1)
    return float(mesh.h[hit].max()) if hit.any() else float("nan")


def adapt_run(problem, p: int | None = None, config: AdaptConfig | None = None,
              mesh: Mesh | None = None, callback=None, mesh_callback=None) -> list[RunRecord]:
    """Adaptive loop driven by one estimator, refining with newest vertex bisection.

    Records carry ``h = ndof^(-1/2)`` so that their EOC columns are rates
    with respect to the number of degrees of freedom (two times the slope in
    ``N``).  Stops after ``max_levels`` iterations or before exceeding
    ``max_dofs``.  ``callback(record)`` and ``mesh_callback(iteration, mesh)``
    are called once per iteration.
    """
    config = config or AdaptConfig(p=p or 2)
    if p is not None and p != config.p:
        config = AdaptConfig(**{**config.__dict__, "p": p})
    p = config.p
    mesh = mesh or problem.initial_mesh()
    nb = (p + 1) * (p + 2) // 2
    records: list[RunRecord] = []
    for it in range(1, config.max_levels + 1):
        if mesh.n_elements * nb > config.max_dofs:
            break
        t0 = time.perf_counter()
        try:
            sol = discrete_solve(problem, mesh, p, config.penalties, config.quad_boost)
        except SolverError as exc:
            raise AdaptError(it, exc) from exc
        rec, rep = evaluate(problem, sol, it, sol.space.ndof ** -0.5, config.quad_boost)
        if problem.singular_point is not None:
            rec.extra["corner_h"] = corner_diameter(mesh, problem.singular_point)
        rec.seconds = time.perf_counter() - t0
        records.append(rec)
        fill_eoc(records)
        if callback:
            callback(rec)
        if mesh_callback:
            mesh_callback(it, mesh)
        ind = rep.eta_T if config.estimator == "eta" else rep.gimel_T
        marked = doerfler_mark(ind**2, config.theta)
        if marked.size == 0:
            break
        mesh = refine_nvb(mesh, marked)
    return records


def slope(records: list[RunRecord], attr: str = "err_hess", first: int = 0) -> float:
    """Least-squares slope of log(error) against log(ndof) over ``records[first:]``."""
    r = records[first:]
    if len(r) < 2:
        raise ValueError("need at least two records for a slope")
    x = np.log([q.ndof for q in r])
    y = np.log([getattr(q, attr) for q in r])
    return float(np.polyfit(x, y, 1)[0])
