"""P1 finite element spaces with homogeneous Dirichlet elimination.

Nodal vectors are plain float arrays holding one value per free dof, in
ascending vertex-id order.  Boundary vertices carry the value zero and are
not stored.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh

__all__ = ["FESpace", "build_fespace", "interpolate", "prolongation", "to_vertex_values"]


@dataclass(frozen=True, eq=False)
class FESpace:
    mesh: Mesh
    free_dofs: np.ndarray
    fixed_dofs: np.ndarray
    vertex_to_free: np.ndarray  # -1 for fixed vertices
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_vertices(self) -> int:
        return self.mesh.n_vertices

    @property
    def n_free(self) -> int:
        return self.free_dofs.size

    @property
    def dof_coordinates(self) -> np.ndarray:
        return self.mesh.vertices[self.free_dofs]


def build_fespace(mesh: Mesh) -> FESpace:
    interior = ~mesh.boundary_vertex
    free = np.flatnonzero(interior)
    fixed = np.flatnonzero(~interior)
    v2f = np.full(mesh.n_vertices, -1, dtype=np.int64)
    v2f[free] = np.arange(free.size)
    return FESpace(mesh=mesh, free_dofs=free, fixed_dofs=fixed, vertex_to_free=v2f)


def interpolate(space: FESpace, u) -> np.ndarray:
    """Nodal interpolant of the pointwise function ``u(x, y)`` on the free dofs."""
    xy = space.dof_coordinates
    values = np.asarray(u(xy[:, 0], xy[:, 1]), dtype=float)
    return np.broadcast_to(values, (space.n_free,)).copy()


def to_vertex_values(space: FESpace, u: np.ndarray) -> np.ndarray:
    """Expand a free-dof vector to all vertices, boundary values set to zero."""
    full = np.zeros(space.n_vertices)
    full[space.free_dofs] = u
    return full


def prolongation(coarse: FESpace, fine: FESpace) -> sp.csr_matrix:
    """Matrix of the embedding of the coarse P1 space into the fine one.

    Needs ``fine.mesh.vertex_origin``; fixed coarse parents contribute zero.
    """
    origin = fine.mesh.vertex_origin
    if origin is None:
        raise ValueError("fine mesh has no refinement genealogy (vertex_origin missing)")
    if origin.max() >= coarse.n_vertices:
        raise ValueError("vertex_origin refers to vertices outside the coarse mesh")
    rows_v = fine.free_dofs
    a = origin[rows_v, 0]
    b = origin[rows_v, 1]
    is_mid = b >= 0
    ca = coarse.vertex_to_free[a]
    cb = np.where(is_mid, coarse.vertex_to_free[np.maximum(b, 0)], -1)
    weight = np.where(is_mid, 0.5, 1.0)

    frow = np.arange(rows_v.size)
    rows = np.concatenate([frow[ca >= 0], frow[cb >= 0]])
    cols = np.concatenate([ca[ca >= 0], cb[cb >= 0]])
    vals = np.concatenate([weight[ca >= 0], np.full(np.count_nonzero(cb >= 0), 0.5)])
    P = sp.csr_matrix((vals, (rows, cols)), shape=(fine.n_free, coarse.n_free))
    P.sum_duplicates()
    P.sort_indices()
    return P
