"""Full multigrid for semilinear problems, and a fine-level Newton reference solver."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assemble import (
    assemble_load,
    assemble_stiffness,
    energy_norm,
    error_norms,
    nonlinear_jacobian,
    nonlinear_residual,
    quadrature_data,
)
from .correction import (
    CoarseTrace,
    CorrectionConfig,
    CorrectionError,
    _problem_load,
    _ReducedProblem,
    _solve_reduced,
    damped_newton,
    one_correction_step,
)
from .fespace import build_fespace, prolongation
from .mesh import Mesh, l_shaped_mesh, uniform_refine, unit_square_mesh
from .quadrature import triangle_rule
from .sparse import MGLevelStack

__all__ = [
    "Hierarchy",
    "FMGConfig",
    "LevelRecord",
    "RunRecord",
    "FMGError",
    "CoarseMeshTooCoarseError",
    "base_mesh",
    "build_hierarchy",
    "solve_coarsest",
    "solve_level",
    "full_multigrid",
    "newton_reference_solve",
]


class FMGError(RuntimeError):
    """A level of the full multigrid run failed; ``record`` keeps the finished levels."""

    def __init__(self, message, record=None, level=None):
        super().__init__(message)
        self.record = record
        self.level = level


class CoarseMeshTooCoarseError(FMGError):
    """The correction grew across a level, i.e. the coarse space is too poor to contract."""


class Hierarchy:
    """Nested P1 spaces with stiffness matrices, prolongations and an MG stack.

    Level numbers run from 1 (coarsest) to ``n_levels``; ``coarse_index``
    names the level whose space plays the role of ``V_H``.
    """

    def __init__(self, problem, meshes, coarse_index: int = 1, quad=None):
        if not meshes:
            raise ValueError("need at least one mesh")
        if not 1 <= coarse_index <= len(meshes):
            raise ValueError(f"coarse_index {coarse_index} outside 1..{len(meshes)}")
        self.problem = problem
        self.coarse_index = coarse_index
        self.quad = triangle_rule(4) if quad is None else quad
        self.meshes, self.spaces, self.matrices, self.loads = [], [], [], []
        self.prolongations = [None]
        self._composed = {}
        self._traces = {}
        for mesh in meshes:
            self._add(mesh)
        self.stack = MGLevelStack(self.matrices, self.prolongations[1:])

    def _add(self, mesh: Mesh):
        space = build_fespace(mesh)
        k = len(self.spaces) + 1
        if self.spaces:
            P = prolongation(self.spaces[-1], space)
            self.prolongations.append(P)
        self.meshes.append(mesh)
        self.spaces.append(space)
        self.matrices.append(assemble_stiffness(space, self.problem.diffusion))
        quadrature_data(space, self.quad)
        self.loads.append(assemble_load(space, self.problem.source, self.quad))
        H = self.coarse_index
        if k == H:
            self._composed[k] = sp.identity(space.n_free, format="csr")
        elif k > H:
            self._composed[k] = (self.prolongations[k - 1] @ self._composed[k - 1]).tocsr()
        if k >= H:
            self._traces[k] = CoarseTrace(self.matrices[-1], self._composed[k], self.quad_data(k))
        return space

    def extend(self, mesh: Mesh) -> None:
        """Append a level refined from the current finest mesh."""
        self._add(mesh)
        self.stack.add_level(self.matrices[-1], self.prolongations[-1])

    @property
    def n_levels(self) -> int:
        return len(self.spaces)

    def space(self, k):
        return self.spaces[k - 1]

    def mesh(self, k):
        return self.meshes[k - 1]

    def stiffness(self, k):
        return self.matrices[k - 1]

    def load(self, k):
        return self.loads[k - 1]

    def quad_data(self, k):
        return quadrature_data(self.spaces[k - 1], self.quad)

    def n_dofs(self, k) -> int:
        return self.spaces[k - 1].n_free

    def composed_prolongation(self, k):
        """Embedding of level ``coarse_index`` into level ``k``."""
        if k < self.coarse_index:
            raise ValueError(f"level {k} is below the coarse index {self.coarse_index}")
        return self._composed[k]

    def coarse_trace(self, k) -> CoarseTrace:
        return self._traces[k]

    def prolong(self, u, k_from: int, k_to: int):
        for j in range(k_from + 1, k_to + 1):
            u = self.prolongations[j - 1] @ u
        return u


def base_mesh(domain: str, base_n: int) -> Mesh:
    """Initial mesh: ``unit_square_mesh(base_n)``, or the L-shape with ``base_n`` cells per unit side."""
    if domain == "unit_square":
        return unit_square_mesh(base_n)
    if domain == "l_shaped":
        if base_n < 1 or base_n & (base_n - 1):
            raise ValueError("L-shaped base resolution must be a power of two")
        mesh = l_shaped_mesh()
        while base_n > 1:
            mesh = uniform_refine(mesh)
            base_n //= 2
        return mesh
    raise ValueError(f"unknown domain {domain!r}")


def build_hierarchy(problem, n_levels: int, base_n: int = 4, coarse_index: int = 1) -> Hierarchy:
    """Hierarchy from ``n_levels - 1`` uniform refinements of the problem's base mesh."""
    if n_levels < 2:
        raise ValueError("need at least two levels")
    meshes = [base_mesh(problem.domain, base_n)]
    for _ in range(n_levels - 1):
        meshes.append(uniform_refine(meshes[-1]))
    h = Hierarchy(problem, meshes, coarse_index=coarse_index)
    dims = [s.n_free for s in h.spaces]
    if any(b <= a for a, b in zip(dims, dims[1:])):
        raise ValueError(f"spaces are not strictly nested: dimensions {dims}")
    return h


@dataclass(frozen=True)
class FMGConfig:
    m: int = 2
    p: int = 1
    coarse_tol: float = 1e-12
    correction: CorrectionConfig = field(default_factory=CorrectionConfig)
    # abort when the level update grows by more than this factor
    divergence_factor: float = 2.0

    def __post_init__(self):
        if self.m < 1 or self.p < 1:
            raise ValueError("m and p must be at least 1")

    @property
    def correction_config(self) -> CorrectionConfig:
        return replace(self.correction, m=self.m)


@dataclass
class LevelRecord:
    level: int
    n_dofs: int
    time_s: float
    cumulative_s: float
    nonlinear_iters: int
    energy_error: float = float("nan")
    l2_error: float = float("nan")
    update_norm: float = float("nan")


@dataclass
class RunRecord:
    levels: list = field(default_factory=list)
    setup_time_s: float = float("nan")

    def column(self, name):
        return np.array([getattr(r, name) for r in self.levels])


def solve_level(hierarchy: Hierarchy, k: int, problem=None, tol: float = 1e-12,
                cfg: CorrectionConfig | None = None, u0=None):
    """Damped Newton on level ``k`` with dense linear algebra, from ``u0`` (default zero).

    Returns ``(u, iterations)``.
    """
    problem = hierarchy.problem if problem is None else problem
    cfg = CorrectionConfig() if cfg is None else cfg
    space = hierarchy.space(k)
    if space.n_free == 0:
        return np.zeros(0), 0
    if k == hierarchy.coarse_index:
        trace = hierarchy.coarse_trace(k)
    else:
        trace = CoarseTrace(hierarchy.stiffness(k), sp.identity(space.n_free, format="csr"),
                            hierarchy.quad_data(k))
    red = _ReducedProblem(trace, hierarchy.stiffness(k), _problem_load(hierarchy, k, problem),
                          problem.nonlinear, cfg.fd_step)
    c0 = np.zeros(space.n_free) if u0 is None else np.asarray(u0, dtype=float)
    c, its, _ = _solve_reduced(red, c0, replace(cfg, tol=tol, pivot_tol=0.0))
    return c, its


def solve_coarsest(hierarchy: Hierarchy, problem=None, tol: float = 1e-12, cfg: CorrectionConfig | None = None):
    """Damped Newton on level 1 from zero.  Returns ``(u, iterations)``."""
    return solve_level(hierarchy, 1, problem, tol, cfg)


def _default_errors(hierarchy, problem):
    if not problem.has_exact:
        return None

    def errors(k, u):
        return error_norms(hierarchy.space(k), u, problem.exact, problem.exact_grad, problem.diffusion)

    return errors


def full_multigrid(hierarchy: Hierarchy, problem=None, cfg: FMGConfig | None = None,
                   n_levels: int | None = None, error_fn="exact", callback=None):
    """Coarsest exact solve, then ``p`` correction steps per finer level.

    Levels below ``coarse_index`` are solved exactly from the prolonged
    iterate, since ``V_H`` is not a subspace of them.
    ``error_fn(k, u) -> (energy, l2)`` is evaluated outside the timed region;
    the default uses the manufactured solution when there is one.
    ``callback(k, u)`` is called after each level.  Returns ``(u, RunRecord)``.
    """
    problem = hierarchy.problem if problem is None else problem
    cfg = FMGConfig() if cfg is None else cfg
    ccfg = cfg.correction_config
    n = hierarchy.n_levels if n_levels is None else n_levels
    if error_fn == "exact":
        error_fn = _default_errors(hierarchy, problem)
    record = RunRecord()
    clock = time.perf_counter
    cumulative = 0.0

    def finish(k, u, dt, iters, upd):
        nonlocal cumulative
        cumulative += dt
        rec = LevelRecord(k, hierarchy.n_dofs(k), dt, cumulative, iters, update_norm=upd)
        if error_fn is not None:
            rec.energy_error, rec.l2_error = error_fn(k, u)
        record.levels.append(rec)
        if callback is not None:
            callback(k, u)

    t0 = clock()
    try:
        u, its = solve_coarsest(hierarchy, problem, cfg.coarse_tol, ccfg)
    except CorrectionError as exc:
        raise FMGError(f"coarsest solve failed: {exc}", record, 1) from exc
    finish(1, u, clock() - t0, its, float("nan"))

    prev_update = None
    for k in range(2, n + 1):
        t0 = clock()
        u0 = hierarchy.prolongations[k - 1] @ u
        u = u0
        iters = 0
        try:
            if k < hierarchy.coarse_index:
                # below V_H the correction space would not be a subspace: solve exactly
                u, iters = solve_level(hierarchy, k, problem, cfg.coarse_tol, ccfg, u0)
            else:
                for _ in range(cfg.p):
                    res = one_correction_step(hierarchy, k, u, problem, ccfg, full_output=True)
                    u = res.u
                    iters += res.nonlinear_iterations
        except CorrectionError as exc:
            raise FMGError(f"level {k}: {exc}", record, k) from exc
        dt = clock() - t0
        update = energy_norm(hierarchy.stiffness(k), u - u0)
        finish(k, u, dt, iters, update)
        if prev_update is not None and prev_update > 0 and update > cfg.divergence_factor * prev_update:
            raise CoarseMeshTooCoarseError(
                f"level {k}: correction grew from {prev_update:.3e} to {update:.3e}; "
                "coarse mesh too coarse for the correction to contract",
                record, k,
            )
        prev_update = update
    return u, record


def newton_reference_solve(hierarchy: Hierarchy, level: int, problem=None, tol: float = 1e-10,
                           u0=None, max_iter: int = 50, fd_step: float = 1e-6):
    """Damped Newton on a single level with sparse direct inner solves.

    This is the test oracle for the discrete solution on ``level``.
    """
    problem = hierarchy.problem if problem is None else problem
    space = hierarchy.space(level)
    A = hierarchy.stiffness(level)
    b = _problem_load(hierarchy, level, problem)
    f = problem.nonlinear
    quad = hierarchy.quad

    def residual(u):
        return A @ u + nonlinear_residual(space, f, u, quad) - b

    def step(u, r):
        J = (A + nonlinear_jacobian(space, f, u, quad, fd_step)).tocsc()
        return -spla.spsolve(J, r)

    x0 = np.zeros(space.n_free) if u0 is None else u0
    if space.n_free == 0:
        return np.zeros(0)
    u, _, _ = damped_newton(residual, step, x0, tol, max_iter)
    return u
