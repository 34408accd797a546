"""One correction step for semilinear problems.

A step takes an iterate ``u`` on level ``k`` and

1. runs ``m`` V-cycles on the *linear* problem ``a(w, v) = (g - f(x, u), v)``
   starting from ``u``, giving ``u_tilde``;
2. solves the semilinear problem on the small space
   ``V_H + span{u_tilde}`` (coarse space plus one fine function).

The small problem is integrated on the fine mesh through the embedding
``E = [P_{H->k} | u_tilde]``: unknowns are coefficients ``c`` and the fine
function is ``E c``.  Its size is ``dim V_H + 1`` whatever ``k`` is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import TYPE_CHECKING

import numpy as np
import scipy.sparse as sp
from numba import njit

from .assemble import _eval_term, derivative_at, nonlinear_residual
from .sparse import FactorizationError, _solve_factor, cholesky_factor, matvec, mg_solve_m_steps

if TYPE_CHECKING:  # pragma: no cover
    from .fmg import Hierarchy
    from .problems import ProblemSpec

__all__ = [
    "CorrectionConfig",
    "CorrectionError",
    "DegenerateSpaceError",
    "AugmentedSpace",
    "CoarseTrace",
    "CoarseSolveResult",
    "damped_newton",
    "linearized_rhs",
    "approximate_linear_solve",
    "build_augmented_space",
    "coarse_semilinear_solve",
    "one_correction_step",
]


class CorrectionError(ArithmeticError):
    """The nonlinear solve on the augmented space failed."""

    def __init__(self, message, residual_norm=None, iterations=None):
        super().__init__(message)
        self.residual_norm = residual_norm
        self.iterations = iterations


class DegenerateSpaceError(CorrectionError):
    """``u_tilde`` is numerically inside the coarse space."""


@dataclass(frozen=True)
class CorrectionConfig:
    m: int = 2
    solver: str = "newton"  # or "fixed_point"
    tol: float = 1e-10
    max_iter: int = 50
    max_halvings: int = 20
    fd_step: float = 1e-6
    pivot_tol: float = 1e-13
    nu_pre: int = 2
    nu_post: int = 2

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be at least 1")
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")
        if self.solver not in ("newton", "fixed_point"):
            raise ValueError(f"unknown nonlinear solver {self.solver!r}")


def damped_newton(residual, solve_step, x0, tol, max_iter=50, max_halvings=20):
    """Newton iteration with step halving on the residual 2-norm.

    ``solve_step(x, r)`` returns the correction ``dx`` with ``J(x) dx = -r``.
    Returns ``(x, iterations, residual_norm)``.
    """
    x = np.array(x0, dtype=float, copy=True)
    r = residual(x)
    nr = math.sqrt(r @ r)
    it = 0
    while nr > tol:
        if it >= max_iter:
            raise CorrectionError(f"no convergence after {it} iterations, |R| = {nr:.3e}",
                                  residual_norm=nr, iterations=it)
        dx = solve_step(x, r)
        t = 1.0
        for _ in range(max_halvings + 1):
            xt = x + t * dx
            rt = residual(xt)
            nt = math.sqrt(rt @ rt)
            if nt <= tol or nt < (1.0 - 1e-4 * t) * nr:
                break
            t *= 0.5
        else:
            raise CorrectionError(f"line search failed after {max_halvings} halvings, |R| = {nr:.3e}",
                                  residual_norm=nr, iterations=it)
        x, r, nr = xt, rt, nt
        it += 1
    return x, it, nr


def _problem_load(hierarchy, k, problem):
    if problem is hierarchy.problem:
        return hierarchy.load(k)
    from .assemble import assemble_load

    return assemble_load(hierarchy.space(k), problem.source, hierarchy.quad)


def linearized_rhs(hierarchy: "Hierarchy", k: int, u_prev: np.ndarray, problem: "ProblemSpec") -> np.ndarray:
    """Right side ``(g, v) - (f(x, u_prev), v)`` of the linearized problem."""
    space = hierarchy.space(k)
    return _problem_load(hierarchy, k, problem) - nonlinear_residual(
        space, problem.nonlinear, u_prev, hierarchy.quad)


def approximate_linear_solve(stack, k: int, b, u_prev, m: int, nu_pre: int = 2, nu_post: int = 2):
    """``m`` V-cycles from ``u_prev``; deliberately not an exact solve."""
    return mg_solve_m_steps(stack, k, b, u_prev, m, nu_pre, nu_post)


@dataclass(frozen=True, eq=False)
class AugmentedSpace:
    """Embedding of ``V_H + span{u_tilde}`` into level ``k``.

    ``E = [P_{H->k} | u_tilde]`` has ``n_k`` rows and ``n_H + 1`` columns.
    """

    prolongation: sp.csr_matrix
    u_tilde: np.ndarray
    level: int
    coarse_index: int

    @property
    def dim(self) -> int:
        return self.prolongation.shape[1] + 1

    @cached_property
    def E(self) -> sp.csr_matrix:
        E = sp.hstack([self.prolongation, sp.csr_matrix(self.u_tilde[:, None])], format="csr")
        E.sort_indices()
        return E

    def embed(self, c) -> np.ndarray:
        c = np.asarray(c, dtype=float)
        return self.prolongation @ c[:-1] + c[-1] * self.u_tilde


def build_augmented_space(hierarchy: "Hierarchy", k: int, u_tilde) -> AugmentedSpace:
    H = hierarchy.coarse_index
    if not H <= k <= hierarchy.n_levels:
        raise ValueError(f"level {k} must satisfy coarse index {H} <= k <= {hierarchy.n_levels}")
    u_tilde = np.asarray(u_tilde, dtype=float)
    PH = hierarchy.composed_prolongation(k)
    if u_tilde.shape != (PH.shape[0],):
        raise ValueError("u_tilde does not live on level k")
    return AugmentedSpace(PH, u_tilde, k, H)


@dataclass
class CoarseSolveResult:
    u: np.ndarray
    coefficients: np.ndarray
    iterations: int
    residual_norm: float


_EMPTY = np.zeros(0)


class CoarseTrace:
    """Coarse basis functions evaluated at the fine quadrature points of one level.

    Every fine quadrature point lies inside one coarse cell, so each row of
    ``B @ P_H`` has at most three nonzeros; they are kept padded in
    ``idx``/``val`` (padding column ``n_H``) for a single-pass assembly of
    weighted coarse mass matrices.
    """

    def __init__(self, A, PH, qd):
        self.qd = qd
        self.PH = PH
        self.PHt = PH.T.tocsr()
        self.n_coarse = PH.shape[1]
        self.BPH = (qd.B @ PH).tocsr()
        self.BPH.sort_indices()
        self.BPHt = self.BPH.T.tocsr()
        self.A_H = np.asarray((self.PHt @ (A @ PH)).todense())
        nq = self.BPH.shape[0]
        counts = np.diff(self.BPH.indptr)
        if counts.size and counts.max() > 3:
            raise ValueError("coarse trace has more than three entries per quadrature point")
        self.idx = np.full((nq, 3), self.n_coarse, dtype=np.int64)
        self.val = np.zeros((nq, 3))
        slot = np.arange(self.BPH.nnz) - np.repeat(self.BPH.indptr[:-1], counts)
        rows = np.repeat(np.arange(nq), counts)
        self.idx[rows, slot] = self.BPH.indices
        self.val[rows, slot] = self.BPH.data
        # compile the kernels outside any timed region
        self.weighted_mass(np.zeros(nq))
        self.integrate(self.evaluate(np.zeros(self.n_coarse), 1.0, np.zeros(nq)))
        self.evaluate(np.zeros(self.n_coarse))

    def evaluate(self, cH, scale=0.0, extra=None) -> np.ndarray:
        """Values of ``P_H cH (+ scale * extra)`` at the fine quadrature points."""
        if extra is None:
            extra, scale = _EMPTY, 0.0
        padded = np.zeros(self.n_coarse + 1)
        padded[:-1] = cH
        return _trace_evaluate(self.idx, self.val, padded, float(scale), extra)

    def integrate(self, values) -> np.ndarray:
        """``(B P_H)^T values``."""
        return _trace_integrate(self.idx, self.val, np.ascontiguousarray(values, dtype=float),
                                self.n_coarse)

    def weighted_mass(self, weights):
        """``(B P_H)^T diag(weights) (B P_H)`` as a dense matrix."""
        n1 = self.n_coarse + 1
        out = np.zeros((n1, n1))
        _accumulate_mass(self.idx, self.val, np.ascontiguousarray(weights, dtype=float), out)
        return out[:-1, :-1]


@njit(cache=True)
def _trace_evaluate(idx, val, c, scale, extra):
    nq = idx.shape[0]
    out = np.empty(nq)
    for q in range(nq):
        s = val[q, 0] * c[idx[q, 0]] + val[q, 1] * c[idx[q, 1]] + val[q, 2] * c[idx[q, 2]]
        if extra.shape[0]:
            s += scale * extra[q]
        out[q] = s
    return out


@njit(cache=True)
def _trace_integrate(idx, val, values, n):
    out = np.zeros(n + 1)
    for q in range(idx.shape[0]):
        for a in range(3):
            out[idx[q, a]] += val[q, a] * values[q]
    return out[:n]


@njit(cache=True)
def _accumulate_mass(idx, val, weights, out):
    # diagonal and one triangle per point, the other triangle mirrored at the end
    for q in range(idx.shape[0]):
        w = weights[q]
        for a in range(3):
            wa = w * val[q, a]
            ia = idx[q, a]
            out[ia, ia] += wa * val[q, a]
            for b in range(a + 1, 3):
                out[ia, idx[q, b]] += wa * val[q, b]
    n = out.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            s = out[i, j] + out[j, i]
            out[i, j] = s
            out[j, i] = s


class _ReducedProblem:
    """Residual and Jacobian of the semilinear problem restricted to ``V_H (+ span{w})``.

    Unknowns are ``c = (c_H, c_w)``; the fine function is ``P_H c_H + c_w w``.
    Without ``w`` the space is ``V_H`` alone.
    """

    def __init__(self, trace: CoarseTrace, A, b, f, fd_step, w=None):
        self.trace = trace
        self.qd = trace.qd
        self.f = f
        self.fd_step = fd_step
        self.w = w
        self._last_c = self._last_uq = None
        A_H = trace.A_H
        b_H = matvec(trace.PHt, b)
        if w is None:
            self.A_red = A_H
            self.b_red = b_H
            self.Bw = None
        else:
            Aw = matvec(A, w)
            coupling = matvec(trace.PHt, Aw)
            nH = trace.n_coarse
            self.A_red = np.empty((nH + 1, nH + 1))
            self.A_red[:nH, :nH] = A_H
            self.A_red[:nH, nH] = coupling
            self.A_red[nH, :nH] = coupling
            self.A_red[nH, nH] = w @ Aw
            self.b_red = np.append(b_H, w @ b)
            self.Bw = matvec(self.qd.B, w)

    def _split(self, c):
        if self.w is None:
            return c, 0.0
        return c[:-1], c[-1]

    def values_at_quadrature(self, c):
        # the Jacobian is always requested at the last residual point
        if c is self._last_c:
            return self._last_uq
        cH, cw = self._split(c)
        uq = self.trace.evaluate(cH, cw, self.Bw)
        self._last_c, self._last_uq = c, uq
        return uq

    def embed(self, c):
        cH, cw = self._split(c)
        u = matvec(self.trace.PH, cH)
        return u if self.w is None else u + cw * self.w

    def residual(self, c):
        uq = self.values_at_quadrature(c)
        wf = self.qd.weights * _eval_term(self.qd, self.f.eval, uq, "f")
        r = self.A_red @ c - self.b_red
        r[:self.trace.n_coarse] += self.trace.integrate(wf)
        if self.Bw is not None:
            r[-1] += self.Bw @ wf
        return r

    def jacobian(self, c):
        uq = self.values_at_quadrature(c)
        d = _eval_term(self.qd, lambda x, y, u: derivative_at(self.f, x, y, u, self.fd_step), uq, "df/du")
        wd = self.qd.weights * d
        J = self.A_red.copy()
        nH = self.trace.n_coarse
        J[:nH, :nH] += self.trace.weighted_mass(wd)
        if self.Bw is not None:
            wdw = wd * self.Bw
            coupling = self.trace.integrate(wdw)
            J[:nH, nH] += coupling
            J[nH, :nH] += coupling
            J[nH, nH] += self.Bw @ wdw
        return J


def _solve_reduced(red: _ReducedProblem, c0, cfg: CorrectionConfig):
    if cfg.solver == "newton":
        def step(c, r):
            L = cholesky_factor(red.jacobian(c), cfg.pivot_tol)
            return -_solve_factor(L, r)
    else:
        L0 = cholesky_factor(red.A_red, cfg.pivot_tol)

        def step(c, r):
            # Picard on the f-term: A c_new = b - F(c)  <=>  c_new - c = -A^{-1} R(c)
            return -_solve_factor(L0, r)

    return damped_newton(red.residual, step, c0, cfg.tol, cfg.max_iter, cfg.max_halvings)


def coarse_semilinear_solve(hierarchy: "Hierarchy", aug: AugmentedSpace, problem: "ProblemSpec",
                            cfg: CorrectionConfig | None = None) -> CoarseSolveResult:
    """Solve ``E^T (A_k E c + F_k(E c) - b_k) = 0`` starting from ``c = (0, ..., 0, 1)``.

    If ``u_tilde`` is exactly zero, or ``k`` is the coarse level itself, the
    augmented space is just ``V_H`` and the last coordinate is dropped; on
    the coarse level the solve starts at ``u_tilde``.  Otherwise a
    ``u_tilde`` that is numerically in ``V_H`` raises
    :class:`DegenerateSpaceError`.
    """
    cfg = CorrectionConfig() if cfg is None else cfg
    k = aug.level
    w = aug.u_tilde
    at_coarse = k == aug.coarse_index
    zero_w = at_coarse or not np.any(w)
    red = _ReducedProblem(hierarchy.coarse_trace(k), hierarchy.stiffness(k),
                          _problem_load(hierarchy, k, problem), problem.nonlinear, cfg.fd_step,
                          None if zero_w else w)
    if at_coarse:
        c0 = w.copy()
    else:
        c0 = np.zeros(aug.dim - 1 if zero_w else aug.dim)
        if not zero_w:
            c0[-1] = 1.0
    try:
        c, its, nr = _solve_reduced(red, c0, cfg)
    except FactorizationError as exc:
        raise DegenerateSpaceError(
            f"reduced Jacobian on level {k} is singular; u_tilde lies in the coarse space ({exc})"
        ) from exc
    u = red.embed(c)
    if zero_w:
        c = np.append(c, 0.0)
    return CoarseSolveResult(u, c, its, nr)


@dataclass
class CorrectionResult:
    u: np.ndarray
    u_tilde: np.ndarray
    coefficients: np.ndarray
    nonlinear_iterations: int
    residual_norm: float


def one_correction_step(hierarchy: "Hierarchy", k: int, u_ell, problem: "ProblemSpec",
                        cfg: CorrectionConfig | None = None, full_output: bool = False):
    """Linearized m-V-cycle solve followed by the augmented-space semilinear solve.

    Returns the new iterate, or a :class:`CorrectionResult` with
    ``full_output=True``.
    """
    cfg = CorrectionConfig() if cfg is None else cfg
    b = linearized_rhs(hierarchy, k, u_ell, problem)
    u_tilde = approximate_linear_solve(hierarchy.stack, k, b, u_ell, cfg.m, cfg.nu_pre, cfg.nu_post)
    aug = build_augmented_space(hierarchy, k, u_tilde)
    res = coarse_semilinear_solve(hierarchy, aug, problem, cfg)
    if not full_output:
        return res.u
    return CorrectionResult(res.u, u_tilde, res.coefficients, res.iterations, res.residual_norm)
