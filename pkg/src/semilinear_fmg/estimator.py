"""Residual a posteriori estimator, Dörfler marking and the adaptive FMG loop.

For P1 elements and a constant diffusion matrix the cellwise term
``div(A grad u_h)`` vanishes, so the element residual is ``g - f(x, u_h)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .assemble import _coef, _eval_term, cell_gradients, quadrature_data
from .correction import CorrectionError, one_correction_step
from .fespace import FESpace, to_vertex_values
from .fmg import FMGConfig, FMGError, Hierarchy, solve_coarsest
from .mesh import Mesh, bisect_refine
from .sparse import matvec

__all__ = [
    "ErrorIndicators",
    "AdaptiveRecord",
    "AdaptiveRun",
    "compute_indicators",
    "dorfler_mark",
    "adaptive_fmg",
]


@dataclass(frozen=True)
class ErrorIndicators:
    """Squared indicators ``eta2`` per cell and ``total = sqrt(sum(eta2))``."""

    eta2: np.ndarray
    total: float

    @classmethod
    def from_squares(cls, eta2) -> "ErrorIndicators":
        eta2 = np.asarray(eta2, dtype=float)
        if np.any(eta2 < 0):
            raise ValueError("indicators must be nonnegative")
        return cls(eta2, float(np.sqrt(eta2.sum())))

    @property
    def n_cells(self) -> int:
        return self.eta2.size


def cell_gradient_field(space: FESpace, u: np.ndarray) -> np.ndarray:
    """Constant gradient of the P1 function on every cell, shape (nc, 2)."""
    mesh = space.mesh
    _, grads = cell_gradients(mesh.vertices[mesh.cells])
    vals = to_vertex_values(space, np.asarray(u, dtype=float))[mesh.cells]
    return np.einsum("ci,cid->cd", vals, grads)


def volume_indicators(space: FESpace, u, problem, quad=None) -> np.ndarray:
    """``h_K^2 ||g - f(x, u_h)||_{0,K}^2`` per cell."""
    mesh = space.mesh
    qd = quadrature_data(space, quad)
    uq = matvec(qd.B, np.asarray(u, dtype=float))
    g = np.broadcast_to(np.asarray(problem.source(qd.x, qd.y), dtype=float), uq.shape)
    r = g - _eval_term(qd, problem.nonlinear.eval, uq, "f")
    norm2 = (qd.weights * r * r).reshape(mesh.n_cells, -1).sum(axis=1)
    return mesh.cell_diameters ** 2 * norm2


def edge_indicators(space: FESpace, u, coef=None) -> np.ndarray:
    """Jump terms per cell: each interior edge adds ``h_e ||[A grad u_h] . n||_{0,e}^2`` to both neighbours.

    The jump is constant along a straight edge, so ``||J||_{0,e}^2 = J^2 h_e``.
    """
    mesh = space.mesh
    flux = cell_gradient_field(space, u) @ _coef(coef).T
    interior = np.flatnonzero(mesh.edge_cell_count == 2)
    e = mesh.edges[interior]
    left, right = mesh.edge_cells[interior, 0], mesh.edge_cells[interior, 1]
    t = mesh.vertices[e[:, 1]] - mesh.vertices[e[:, 0]]
    h_e = np.hypot(t[:, 0], t[:, 1])
    normal = np.stack([t[:, 1], -t[:, 0]], axis=1) / h_e[:, None]
    jump = np.einsum("ed,ed->e", flux[left] - flux[right], normal)
    contrib = jump ** 2 * h_e ** 2
    out = np.zeros(mesh.n_cells)
    np.add.at(out, left, contrib)
    np.add.at(out, right, contrib)
    return out


def compute_indicators(space: FESpace, u, problem, quad=None) -> ErrorIndicators:
    """Residual indicators ``eta^2(u_h, K)``: volume residual plus interior edge jumps."""
    eta2 = volume_indicators(space, u, problem, quad) + edge_indicators(space, u, problem.diffusion)
    return ErrorIndicators.from_squares(eta2)


def dorfler_mark(ind: ErrorIndicators, fraction: float = 0.5) -> np.ndarray:
    """Smallest set with ``sum eta2 >= fraction**2 * total**2``, as sorted cell ids.

    Cells are taken by descending ``eta2`` with ties broken by ascending id.
    A zero estimator marks nothing.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("marking fraction must lie in (0, 1)")
    eta2 = ind.eta2
    total = eta2.sum()
    if total <= 0.0:
        return np.zeros(0, dtype=np.int64)
    # lexsort: last key is primary
    order = np.lexsort((np.arange(eta2.size), -eta2))
    csum = np.cumsum(eta2[order])
    count = int(np.searchsorted(csum, fraction ** 2 * total, side="left")) + 1
    return np.sort(order[:min(count, eta2.size)])


@dataclass
class AdaptiveRecord:
    iteration: int
    n_dofs: int
    n_cells: int
    eta_total: float
    time_s: float
    nonlinear_iters: int
    n_marked: int = 0


@dataclass
class AdaptiveRun:
    iterations: list = field(default_factory=list)
    # meshes[i] carries chain[i]; final_mesh is the last refinement, not solved on
    meshes: list = field(default_factory=list)
    final_mesh: Mesh | None = None

    def column(self, name):
        return np.array([getattr(r, name) for r in self.iterations])


def adaptive_fmg(problem, base_mesh: Mesh, iterations: int, theta_mark: float = 0.5,
                 cfg: FMGConfig | None = None, callback=None):
    """Solve, estimate, mark, bisect and extend the hierarchy, ``iterations`` times.

    Iteration 1 solves on ``base_mesh`` with Newton; later iterations prolong
    the previous iterate to the refined mesh and apply ``p`` correction
    steps.  Every iteration ends with a refinement, so after ``n`` iterations
    ``run.final_mesh`` has been refined ``n`` times.  Returns the list of
    iterates and an :class:`AdaptiveRun`; ``time_s`` covers the solve only.
    """
    if iterations < 1:
        raise ValueError("need at least one iteration")
    if not 0.0 < theta_mark < 1.0:
        raise ValueError("theta_mark must lie in (0, 1)")
    cfg = FMGConfig() if cfg is None else cfg
    ccfg = cfg.correction_config
    hierarchy = Hierarchy(problem, [base_mesh])
    run = AdaptiveRun()
    chain = []
    clock = time.perf_counter
    u = None
    for it in range(1, iterations + 1):
        k = hierarchy.n_levels
        t0 = clock()
        try:
            if k == 1:
                u, its = solve_coarsest(hierarchy, problem, cfg.coarse_tol, ccfg)
            else:
                u = hierarchy.prolongations[k - 1] @ u
                its = 0
                for _ in range(cfg.p):
                    res = one_correction_step(hierarchy, k, u, problem, ccfg, full_output=True)
                    u = res.u
                    its += res.nonlinear_iterations
        except CorrectionError as exc:
            raise FMGError(f"adaptive iteration {it}: {exc}", run, it) from exc
        dt = clock() - t0
        space = hierarchy.space(k)
        ind = compute_indicators(space, u, problem, hierarchy.quad)
        rec = AdaptiveRecord(it, space.n_free, space.mesh.n_cells, ind.total, dt, its)
        chain.append(u)
        run.meshes.append(space.mesh)
        run.iterations.append(rec)
        if callback is not None:
            callback(it, space, u, ind)
        marked = dorfler_mark(ind, theta_mark)
        rec.n_marked = marked.size
        if marked.size == 0:
            # nothing to refine: repeat on a uniformly bisected mesh so levels stay nested
            marked = np.arange(space.mesh.n_cells)
        run.final_mesh = bisect_refine(space.mesh, marked)
        if it < iterations:
            hierarchy.extend(run.final_mesh)
    return chain, run
