"""Assembly of P1 stiffness, mass, load and nonlinear residual vectors.

Quadrature-based terms go through a per-space interpolation matrix ``B``
that maps free-dof values to values at every quadrature point of every cell
(boundary vertices are zero, so they drop out).  With ``W`` the vector of
physical quadrature weights, ``(phi(x, u_h), phi_i) = (B.T @ (W * phi(B @ u)))_i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fespace import FESpace, to_vertex_values
from .quadrature import QuadratureRule, triangle_rule
from .sparse import matvec

__all__ = [
    "DiffusionCoefficient",
    "NonlinearEvaluationError",
    "QuadratureData",
    "quadrature_data",
    "cell_gradients",
    "local_stiffness",
    "local_mass",
    "assemble_stiffness",
    "assemble_mass",
    "assemble_load",
    "nonlinear_residual",
    "nonlinear_jacobian",
    "error_norms",
    "energy_norm",
    "monotonicity_gap",
    "lipschitz_ratio",
]

DEFAULT_RULE_DEGREE = 4
ERROR_RULE_DEGREE = 6


class NonlinearEvaluationError(ArithmeticError):
    """The nonlinear term returned a non-finite value."""

    def __init__(self, message, point=None, value=None):
        super().__init__(message)
        self.point = point
        self.value = value


@dataclass(frozen=True)
class DiffusionCoefficient:
    """Constant symmetric positive definite 2x2 diffusion matrix."""

    matrix: tuple = ((1.0, 0.0), (0.0, 1.0))

    def __post_init__(self):
        a = np.asarray(self.matrix, dtype=float)
        if a.shape != (2, 2):
            raise ValueError("diffusion matrix must be 2x2")
        if abs(a[0, 1] - a[1, 0]) > 1e-14 * max(1.0, np.abs(a).max()):
            raise ValueError("diffusion matrix must be symmetric")
        if np.linalg.eigvalsh(a).min() <= 0:
            raise ValueError("diffusion matrix must be positive definite")
        object.__setattr__(self, "matrix", tuple(map(tuple, a)))

    @property
    def array(self) -> np.ndarray:
        return np.array(self.matrix)


IDENTITY = DiffusionCoefficient()


def _coef(coef):
    return IDENTITY.array if coef is None else coef.array


def cell_gradients(coords: np.ndarray):
    """Areas (nc,) and barycentric gradients (nc, 3, 2) of cells with vertex coordinates (nc, 3, 2)."""
    x, y = coords[..., 0], coords[..., 1]
    # gradient of lambda_i is the rotated opposite edge over twice the area
    dy = y[:, [1, 2, 0]] - y[:, [2, 0, 1]]
    dx = x[:, [2, 0, 1]] - x[:, [1, 2, 0]]
    area2 = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
    if np.any(area2 <= 0):
        bad = int(np.flatnonzero(area2 <= 0)[0])
        raise ValueError(f"degenerate or inverted cell {bad}")
    grads = np.stack([dy, dx], axis=-1) / area2[:, None, None]
    return 0.5 * area2, grads


def local_stiffness(coords: np.ndarray, coef: DiffusionCoefficient | None = None) -> np.ndarray:
    area, g = cell_gradients(coords)
    return area[:, None, None] * np.einsum("cid,de,cje->cij", g, _coef(coef), g)


def local_mass(coords: np.ndarray) -> np.ndarray:
    area, _ = cell_gradients(coords)
    ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    return area[:, None, None] * ref[None]


def _scatter(space: FESpace, local: np.ndarray, constrained: bool) -> sp.csr_matrix:
    cells = space.mesh.cells
    rows = np.repeat(cells, 3, axis=1).ravel()
    cols = np.tile(cells, (1, 3)).ravel()
    n = space.n_vertices
    full = sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))
    full.sum_duplicates()
    if constrained:
        full = full[space.free_dofs][:, space.free_dofs]
    full = full.tocsr()
    full.sort_indices()
    return full


def assemble_stiffness(space: FESpace, coef: DiffusionCoefficient | None = None,
                       constrained: bool = True) -> sp.csr_matrix:
    """Stiffness matrix ``a(phi_j, phi_i)``; free dofs only unless ``constrained=False``.

    Gradients are constant per cell, so the one-point evaluation is exact.
    """
    coords = space.mesh.vertices[space.mesh.cells]
    return _scatter(space, local_stiffness(coords, coef), constrained)


@dataclass(frozen=True, eq=False)
class QuadratureData:
    """Interpolation matrix, physical weights and points for one space and rule."""

    B: sp.csr_matrix  # (nc * nq, n_free)
    weights: np.ndarray  # (nc * nq,)
    x: np.ndarray
    y: np.ndarray
    rule: QuadratureRule
    _BT: sp.csr_matrix = field(repr=False, default=None)

    @property
    def BT(self) -> sp.csr_matrix:
        return self._BT

    def integrate_against_basis(self, values: np.ndarray) -> np.ndarray:
        return matvec(self._BT, self.weights * values)


def quadrature_data(space: FESpace, rule: QuadratureRule | None = None) -> QuadratureData:
    rule = triangle_rule(DEFAULT_RULE_DEGREE) if rule is None else rule
    cached = space._cache.get(("quad", rule.name))
    if cached is not None:
        return cached
    mesh = space.mesh
    coords = mesh.vertices[mesh.cells]
    area, _ = cell_gradients(coords)
    nc, nq = mesh.n_cells, rule.n_points
    pts = rule.physical_points(coords).reshape(-1, 2)
    free = space.vertex_to_free[mesh.cells]  # (nc, 3)
    rows = np.broadcast_to(np.arange(nc * nq).reshape(nc, nq, 1), (nc, nq, 3))
    cols = np.broadcast_to(free[:, None, :], (nc, nq, 3))
    vals = np.broadcast_to(rule.points[None, :, :], (nc, nq, 3))
    keep = cols >= 0
    B = sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(nc * nq, space.n_free))
    B.sum_duplicates()
    B.sort_indices()
    weights = (area[:, None] * rule.weights[None, :]).ravel()
    BT = B.T.tocsr()
    data = QuadratureData(B, weights, pts[:, 0].copy(), pts[:, 1].copy(), rule, BT)
    space._cache[("quad", rule.name)] = data
    return data


def assemble_mass(space: FESpace, quad: QuadratureRule | None = None) -> sp.csr_matrix:
    qd = quadrature_data(space, quad)
    M = (qd.BT @ sp.diags(qd.weights) @ qd.B).tocsr()
    M.sort_indices()
    return M


def assemble_load(space: FESpace, g, quad: QuadratureRule | None = None) -> np.ndarray:
    """Vector of ``(g, phi_i)`` over free dofs."""
    qd = quadrature_data(space, quad)
    gq = np.broadcast_to(np.asarray(g(qd.x, qd.y), dtype=float), qd.weights.shape)
    return qd.integrate_against_basis(gq)


def _eval_term(qd: QuadratureData, fn, uq: np.ndarray, what: str) -> np.ndarray:
    with np.errstate(all="ignore"):
        vals = np.asarray(fn(qd.x, qd.y, uq), dtype=float)
    if vals.shape != uq.shape:
        vals = np.broadcast_to(vals, uq.shape)
    if not np.isfinite(vals).all():
        i = int(np.flatnonzero(~np.isfinite(vals))[0])
        raise NonlinearEvaluationError(
            f"{what} not finite at x=({qd.x[i]:.6g}, {qd.y[i]:.6g}), u={uq[i]:.6g}",
            point=(qd.x[i], qd.y[i], uq[i]),
            value=vals[i],
        )
    return vals


def nonlinear_residual(space: FESpace, f, u: np.ndarray, quad: QuadratureRule | None = None) -> np.ndarray:
    """Vector of ``(f(x, u_h), phi_i)`` for the P1 function ``u_h`` with nodal values ``u``."""
    qd = quadrature_data(space, quad)
    uq = matvec(qd.B, np.asarray(u, dtype=float))
    return qd.integrate_against_basis(_eval_term(qd, f.eval, uq, "f"))


def derivative_at(f, x, y, u, fd_step: float = 1e-6) -> np.ndarray:
    """``df/du`` from the analytic derivative, else central differences."""
    if f.derivative is not None:
        return f.derivative(x, y, u)
    s = fd_step * (1.0 + np.abs(u))
    return (f.eval(x, y, u + s) - f.eval(x, y, u - s)) / (2.0 * s)


def nonlinear_jacobian(space: FESpace, f, u: np.ndarray, quad: QuadratureRule | None = None,
                       fd_step: float = 1e-6) -> sp.csr_matrix:
    """Mass-like matrix weighted by ``df/du`` at quadrature points."""
    qd = quadrature_data(space, quad)
    uq = qd.B @ u
    d = _eval_term(qd, lambda x, y, v: derivative_at(f, x, y, v, fd_step), uq, "df/du")
    return (qd.BT @ sp.diags(qd.weights * d) @ qd.B).tocsr()


def energy_norm(A, v: np.ndarray) -> float:
    return float(np.sqrt(max(v @ (A @ v), 0.0)))


def error_norms(space: FESpace, u_h: np.ndarray, u_exact, grad_u_exact,
                coef: DiffusionCoefficient | None = None, quad: QuadratureRule | None = None):
    """Energy and L2 norms of ``u_exact - u_h`` by per-cell quadrature.

    Returns ``(energy_error, l2_error)``.
    """
    quad = triangle_rule(ERROR_RULE_DEGREE) if quad is None else quad
    mesh = space.mesh
    coords = mesh.vertices[mesh.cells]
    area, grads = cell_gradients(coords)
    U = to_vertex_values(space, u_h)[mesh.cells]  # (nc, 3)
    grad_h = np.einsum("ci,cid->cd", U, grads)
    pts = quad.physical_points(coords)
    x, y = pts[..., 0], pts[..., 1]
    uh_q = U @ quad.points.T  # (nc, nq)
    gx, gy = grad_u_exact(x, y)
    ex = np.broadcast_to(gx, x.shape) - grad_h[:, 0:1]
    ey = np.broadcast_to(gy, y.shape) - grad_h[:, 1:2]
    a = _coef(coef)
    energy_density = a[0, 0] * ex * ex + 2 * a[0, 1] * ex * ey + a[1, 1] * ey * ey
    w = area[:, None] * quad.weights[None, :]
    energy = float(np.sqrt(np.sum(w * energy_density)))
    l2 = float(np.sqrt(np.sum(w * (u_exact(x, y) - uh_q) ** 2)))
    return energy, l2


def monotonicity_gap(space: FESpace, f, rng, n_pairs: int = 20, bound: float = 5.0,
                     quad: QuadratureRule | None = None) -> float:
    """Smallest ``(F(w) - F(v)) . (w - v)`` over random nodal pairs in [-bound, bound]."""
    worst = np.inf
    for _ in range(n_pairs):
        w = rng.uniform(-bound, bound, space.n_free)
        v = rng.uniform(-bound, bound, space.n_free)
        gap = (nonlinear_residual(space, f, w, quad) - nonlinear_residual(space, f, v, quad)) @ (w - v)
        worst = min(worst, float(gap))
    return worst


def lipschitz_ratio(space: FESpace, f, rng, n_pairs: int = 20, bound: float = 5.0,
                    quad: QuadratureRule | None = None):
    """Largest ``|F(w) - F(v)| / |w - v|`` over random pairs, and the bound it must respect.

    ``F(w) - F(v) = B^T W diag(xi) B (w - v)`` with ``|xi|`` at most the
    pointwise Lipschitz constant ``L``, so the ratio is at most ``L * |M|_2``.
    """
    M = assemble_mass(space, quad)
    lam = float(np.abs(np.linalg.eigvalsh(M.toarray())).max()) if space.n_free else 0.0
    bound_const = f.lipschitz_hint(-bound, bound) * lam
    worst = 0.0
    for _ in range(n_pairs):
        w = rng.uniform(-bound, bound, space.n_free)
        v = rng.uniform(-bound, bound, space.n_free)
        diff = nonlinear_residual(space, f, w, quad) - nonlinear_residual(space, f, v, quad)
        worst = max(worst, float(np.linalg.norm(diff) / np.linalg.norm(w - v)))
    return worst, bound_const
