"""Linear machinery: Gauss-Seidel smoothing, geometric V-cycles, dense Cholesky.

Matrices are ``scipy.sparse.csr_matrix`` with sorted column indices.
Levels are numbered from 1 (coarsest) to n (finest).
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from numba import njit

__all__ = [
    "SingularSmootherError",
    "FactorizationError",
    "gauss_seidel",
    "cholesky_factor",
    "cholesky_solve",
    "MGLevelStack",
    "v_cycle",
    "mg_solve_m_steps",
    "is_symmetric",
    "matvec",
]


class SingularSmootherError(ZeroDivisionError):
    """A zero diagonal entry makes Gauss-Seidel undefined."""


class FactorizationError(ArithmeticError):
    """Cholesky factorization met a non-positive or too small pivot."""

    def __init__(self, message, pivot_index=None, pivot=None):
        super().__init__(message)
        self.pivot_index = pivot_index
        self.pivot = pivot


@njit(cache=True)
def _gs_sweeps(indptr, indices, data, diag, b, x, sweeps, backward):
    n = b.shape[0]
    for _ in range(sweeps):
        for ii in range(n):
            i = n - 1 - ii if backward else ii
            s = b[i]
            for jj in range(indptr[i], indptr[i + 1]):
                j = indices[jj]
                if j != i:
                    s -= data[jj] * x[j]
            x[i] = s / diag[i]


@njit(cache=True)
def _csr_matvec(indptr, indices, data, x):
    n = indptr.shape[0] - 1
    out = np.zeros(n)
    for i in range(n):
        s = 0.0
        for jj in range(indptr[i], indptr[i + 1]):
            s += data[jj] * x[indices[jj]]
        out[i] = s
    return out


def matvec(M, x) -> np.ndarray:
    """``M @ x`` for a csr matrix without scipy's dispatch overhead."""
    return _csr_matvec(M.indptr, M.indices, M.data, x)


def _check_diagonal(diag):
    zero = np.flatnonzero(diag == 0)
    if zero.size:
        raise SingularSmootherError(f"zero diagonal entry in row {int(zero[0])}")


def gauss_seidel(A, b, x, sweeps: int = 1, order: str = "forward", diag=None) -> np.ndarray:
    """Run ``sweeps`` Gauss-Seidel sweeps on ``A x = b`` starting from ``x``.

    Returns a new array; ``x`` is left untouched.  ``order`` is ``"forward"``
    or ``"backward"``.
    """
    if order not in ("forward", "backward"):
        raise ValueError(f"order must be 'forward' or 'backward', got {order!r}")
    A = sp.csr_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise ValueError("Gauss-Seidel needs a square matrix")
    if diag is None:
        diag = A.diagonal()
        _check_diagonal(diag)
    out = np.array(x, dtype=float, copy=True)
    if sweeps > 0 and out.size:
        _gs_sweeps(A.indptr, A.indices, A.data, diag, np.asarray(b, dtype=float), out,
                   int(sweeps), order == "backward")
    return out


@njit(cache=True)
def _cholesky(A, pivot_tol):
    # returns (L, i, ratio); i >= 0 flags the first failing pivot
    n = A.shape[0]
    L = np.zeros((n, n))
    for j in range(n):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        # written so that NaN fails the tests
        if not s > 0.0:
            return L, j, s
        ratio = s / A[j, j]
        if not ratio > pivot_tol:
            return L, j, ratio
        d = np.sqrt(s)
        L[j, j] = d
        for i in range(j + 1, n):
            t = A[i, j]
            for k in range(j):
                t -= L[i, k] * L[j, k]
            L[i, j] = t / d
    return L, -1, 1.0


def cholesky_factor(A, pivot_tol: float = 0.0) -> np.ndarray:
    """Lower Cholesky factor of the dense SPD matrix ``A``.

    With ``pivot_tol > 0`` a pivot ``L_ii**2`` at or below ``pivot_tol * A_ii``
    is treated as a numerically singular matrix.
    """
    A = np.ascontiguousarray(A.toarray() if sp.issparse(A) else A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("Cholesky needs a square matrix")
    L, i, ratio = _cholesky(A, float(pivot_tol))
    if i >= 0:
        if ratio > 0.0:
            raise FactorizationError(f"relative pivot {ratio:.3e} at index {i} below {pivot_tol:g}",
                                     pivot_index=i, pivot=float(ratio))
        raise FactorizationError(f"matrix is not positive definite (pivot {ratio:.3e} at index {i})",
                                 pivot_index=i, pivot=float(ratio))
    return L


@njit(cache=True)
def _cholesky_substitution(L, b):
    n = b.shape[0]
    y = np.empty(n)
    for i in range(n):
        s = b[i]
        for j in range(i):
            s -= L[i, j] * y[j]
        y[i] = s / L[i, i]
    for i in range(n - 1, -1, -1):
        s = y[i]
        for j in range(i + 1, n):
            s -= L[j, i] * y[j]
        y[i] = s / L[i, i]
    return y


def _solve_factor(L, b):
    if L.size == 0:
        return np.zeros(0)
    return _cholesky_substitution(L, np.asarray(b, dtype=float))


def cholesky_solve(A, b, pivot_tol: float = 0.0) -> np.ndarray:
    return _solve_factor(cholesky_factor(A, pivot_tol), np.asarray(b, dtype=float))


def is_symmetric(A, rng=None, samples: int = 200) -> bool:
    """Sampled check of ``|A_ij - A_ji| <= 1e-12 max(1, |A_ij|)``."""
    A = sp.csr_matrix(A)
    rng = np.random.default_rng(0) if rng is None else rng
    coo = A.tocoo()
    if coo.nnz == 0:
        return True
    pick = rng.integers(0, coo.nnz, size=min(samples, coo.nnz))
    i, j, v = coo.row[pick], coo.col[pick], coo.data[pick]
    vt = np.asarray(A[j, i]).ravel()
    return bool(np.all(np.abs(v - vt) <= 1e-12 * np.maximum(1.0, np.abs(v))))


class MGLevelStack:
    """Per-level operators for geometric V-cycles.

    Parameters
    ----------
    matrices : list of csr_matrix
        ``A_1, ..., A_n`` on free dofs.
    prolongations : list
        ``P_2, ..., P_n`` where ``P_k`` maps level ``k-1`` to level ``k``.
    """

    def __init__(self, matrices, prolongations):
        if len(prolongations) != len(matrices) - 1:
            raise ValueError("need exactly one prolongation per level above the coarsest")
        self.matrices = []
        self.prolongations = [None]
        self.diagonals = []
        self.restrictions = [None]
        for A in matrices:
            self._append_matrix(A)
        for k, P in enumerate(prolongations, start=2):
            self._append_prolongation(k, P)
        self.coarse_factor = cholesky_factor(self.matrices[0])
        _warm_up()

    def _append_matrix(self, A):
        A = sp.csr_matrix(A)
        A.sort_indices()
        d = A.diagonal()
        _check_diagonal(d)
        self.matrices.append(A)
        self.diagonals.append(d)

    def _append_prolongation(self, k, P):
        P = sp.csr_matrix(P)
        n_fine = self.matrices[k - 1].shape[0]
        n_coarse = self.matrices[k - 2].shape[0]
        if P.shape != (n_fine, n_coarse):
            raise ValueError(f"P_{k} has shape {P.shape}, expected {(n_fine, n_coarse)}")
        self.prolongations.append(P)
        self.restrictions.append(P.T.tocsr())

    def add_level(self, A, P):
        self._append_matrix(A)
        self._append_prolongation(len(self.matrices), P)

    @property
    def n_levels(self) -> int:
        return len(self.matrices)

    def matrix(self, k: int):
        return self.matrices[k - 1]

    def coarse_solve(self, b):
        return _solve_factor(self.coarse_factor, b)


def _warm_up():
    # compile the smoother outside any timed region
    one = np.ones(1)
    indptr, indices = np.array([0, 1], dtype=np.int32), np.zeros(1, dtype=np.int32)
    _gs_sweeps(indptr, indices, one, one, one, np.zeros(1), 1, False)
    _csr_matvec(indptr, indices, one, one)
    _cholesky_substitution(np.ones((1, 1)), one)
    _cholesky(np.ones((1, 1)), 0.0)


def _smooth(A, d, b, x, sweeps, backward):
    if sweeps > 0 and x.size:
        _gs_sweeps(A.indptr, A.indices, A.data, d, b, x, sweeps, backward)


def _v_cycle(stack, k, b, x, nu_pre, nu_post):
    if k == 1:
        return stack.coarse_solve(b)
    A = stack.matrices[k - 1]
    d = stack.diagonals[k - 1]
    _smooth(A, d, b, x, nu_pre, False)
    rc = matvec(stack.restrictions[k - 1], b - matvec(A, x))
    ec = _v_cycle(stack, k - 1, rc, np.zeros_like(rc), nu_pre, nu_post)
    x += matvec(stack.prolongations[k - 1], ec)
    _smooth(A, d, b, x, nu_post, True)
    return x


def v_cycle(stack: MGLevelStack, k: int, b, x, nu_pre: int = 2, nu_post: int = 2) -> np.ndarray:
    """One V-cycle on level ``k``: forward GS, coarse correction, backward GS."""
    if not 1 <= k <= stack.n_levels:
        raise ValueError(f"level {k} outside 1..{stack.n_levels}")
    A = stack.matrices[k - 1]
    b = np.asarray(b, dtype=float)
    if b.shape != (A.shape[0],) or np.shape(x) != (A.shape[0],):
        raise ValueError(f"vector sizes {b.shape}, {np.shape(x)} do not match level {k} ({A.shape[0]})")
    return _v_cycle(stack, k, b, np.array(x, dtype=float, copy=True), int(nu_pre), int(nu_post))


def mg_solve_m_steps(stack: MGLevelStack, k: int, b, x0, m: int,
                     nu_pre: int = 2, nu_post: int = 2) -> np.ndarray:
    """``m`` successive V-cycles from ``x0``."""
    if m < 0:
        raise ValueError("m must be nonnegative")
    x = np.array(x0, dtype=float, copy=True)
    if m == 0:
        return x
    x = v_cycle(stack, k, b, x, nu_pre, nu_post)
    b = np.asarray(b, dtype=float)
    for _ in range(m - 1):
        x = _v_cycle(stack, k, b, x, int(nu_pre), int(nu_post))
    return x
