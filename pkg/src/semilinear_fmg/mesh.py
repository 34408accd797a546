"""Conforming triangular meshes with refinement genealogy.

Cells are stored counterclockwise with the *newest vertex* first, so the
refinement edge of cell ``(p, a, b)`` is ``(a, b)``.  Meshes built from
scratch or by red refinement get the longest-edge labelling; bisection keeps
the labelling it produces.

Every refined mesh records, per vertex, where it came from in the parent
mesh (``vertex_origin``): row ``(a, -1)`` means inherited from coarse vertex
``a``, row ``(a, b)`` means the midpoint of coarse edge ``(a, b)``.  This is
all the prolongation operators need.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

__all__ = [
    "Mesh",
    "MeshError",
    "unit_square_mesh",
    "l_shaped_mesh",
    "uniform_refine",
    "bisect_refine",
    "write_mesh_text",
    "read_mesh_text",
]


class MeshError(RuntimeError):
    """Raised when a mesh operation cannot produce a valid mesh."""


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable 2D triangulation.

    Attributes
    ----------
    vertices : (nv, 2) float array
    cells : (nc, 3) int array, counterclockwise, newest vertex first
    boundary_vertex : (nv,) bool array
    cell_parent : (nc,) int array or None
        Index of the parent cell in the previous mesh.
    vertex_origin : (nv, 2) int array or None
        ``(a, -1)`` for inherited vertices, ``(a, b)`` for edge midpoints.
    level : int
    """

    vertices: np.ndarray
    cells: np.ndarray
    boundary_vertex: np.ndarray
    cell_parent: np.ndarray | None = None
    vertex_origin: np.ndarray | None = None
    level: int = 0

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @cached_property
    def _edge_data(self):
        c = self.cells
        # local edge i is opposite local vertex i
        local = np.stack([c[:, [1, 2]], c[:, [2, 0]], c[:, [0, 1]]], axis=1)
        pairs = np.sort(local.reshape(-1, 2), axis=1)
        edges, inverse, counts = np.unique(
            pairs, axis=0, return_inverse=True, return_counts=True
        )
        return edges, inverse.reshape(-1, 3), counts

    @property
    def edges(self) -> np.ndarray:
        """Unique edges as sorted vertex pairs, shape (ne, 2)."""
        return self._edge_data[0]

    @property
    def cell_edges(self) -> np.ndarray:
        """Edge id of the edge opposite each local vertex, shape (nc, 3)."""
        return self._edge_data[1]

    @property
    def edge_cell_count(self) -> np.ndarray:
        return self._edge_data[2]

    @cached_property
    def edge_cells(self) -> np.ndarray:
        """Incident cells per edge, shape (ne, 2); -1 marks a missing neighbour."""
        ne = self.edges.shape[0]
        out = np.full((ne, 2), -1, dtype=np.int64)
        ce = self.cell_edges.ravel()
        cell_of = np.repeat(np.arange(self.n_cells), 3)
        order = np.argsort(ce, kind="stable")
        ce_sorted = ce[order]
        first = np.ones(ce_sorted.size, dtype=bool)
        first[1:] = ce_sorted[1:] != ce_sorted[:-1]
        out[ce_sorted[first], 0] = cell_of[order][first]
        out[ce_sorted[~first], 1] = cell_of[order][~first]
        return out

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.cells]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def cell_diameters(self) -> np.ndarray:
        p = self.vertices[self.cells]
        lengths = np.linalg.norm(p[:, [1, 2, 0]] - p[:, [2, 0, 1]], axis=2)
        return lengths.max(axis=1)

    @property
    def h_max(self) -> float:
        return float(self.cell_diameters.max())

    @property
    def total_area(self) -> float:
        return float(self.signed_areas.sum())

    def is_conforming(self) -> bool:
        """True if every edge has one or two cells and every area is positive."""
        counts = self.edge_cell_count
        return bool(np.all((counts == 1) | (counts == 2)) and np.all(self.signed_areas > 0))


def _boundary_flags(n_vertices: int, cells: np.ndarray) -> np.ndarray:
    local = np.concatenate([cells[:, [1, 2]], cells[:, [2, 0]], cells[:, [0, 1]]])
    edges, counts = np.unique(np.sort(local, axis=1), axis=0, return_counts=True)
    flags = np.zeros(n_vertices, dtype=bool)
    flags[edges[counts == 1].ravel()] = True
    return flags


def _longest_edge_labelling(vertices: np.ndarray, cells: np.ndarray) -> np.ndarray:
    """Rotate each cell so the vertex opposite its longest edge comes first.

    Ties go to the lowest global vertex index.  Rotation keeps orientation.
    """
    p = vertices[cells]
    opp = np.sum((p[:, [1, 2, 0]] - p[:, [2, 0, 1]]) ** 2, axis=2)
    longest = opp.max(axis=1, keepdims=True)
    candidate = opp >= longest * (1.0 - 1e-10)
    key = np.where(candidate, cells, np.iinfo(np.int64).max)
    first = np.argmin(key, axis=1)
    idx = (first[:, None] + np.arange(3)[None, :]) % 3
    return np.take_along_axis(cells, idx, axis=1)


def _make_mesh(vertices, cells, cell_parent=None, vertex_origin=None, level=0) -> Mesh:
    vertices = np.ascontiguousarray(vertices, dtype=float)
    cells = np.ascontiguousarray(cells, dtype=np.int64)
    return Mesh(
        vertices=vertices,
        cells=cells,
        boundary_vertex=_boundary_flags(vertices.shape[0], cells),
        cell_parent=cell_parent,
        vertex_origin=vertex_origin,
        level=level,
    )


def _rectangle_cells(nx: int, ny: int, offset: int = 0) -> np.ndarray:
    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    v00 = (j * (nx + 1) + i).ravel() + offset
    v10 = v00 + 1
    v01 = v00 + nx + 1
    v11 = v01 + 1
    lower = np.stack([v00, v10, v11], axis=1)
    upper = np.stack([v00, v11, v01], axis=1)
    return np.stack([lower, upper], axis=1).reshape(-1, 3)


def unit_square_mesh(n: int) -> Mesh:
    """Structured mesh of (0, 1)^2 with ``n`` cells per side.

    Each square is cut along its lower-left to upper-right diagonal, giving
    ``(n + 1)**2`` vertices and ``2 n**2`` right triangles.
    """
    if int(n) != n or n < 1:
        raise ValueError(f"cells per side must be a positive integer, got {n!r}")
    n = int(n)
    x, y = np.meshgrid(np.linspace(0.0, 1.0, n + 1), np.linspace(0.0, 1.0, n + 1), indexing="xy")
    vertices = np.column_stack([x.ravel(), y.ravel()])
    cells = _longest_edge_labelling(vertices, _rectangle_cells(n, n))
    return _make_mesh(vertices, cells)


def l_shaped_mesh() -> Mesh:
    """Coarse mesh of (-1, 1)^2 minus [0, 1)^2 made of three unit squares."""
    vertices = np.array(
        [[-1, -1], [0, -1], [1, -1], [-1, 0], [0, 0], [1, 0], [-1, 1], [0, 1]],
        dtype=float,
    )
    squares = [(0, 1, 3, 4), (1, 2, 4, 5), (3, 4, 6, 7)]  # (ll, lr, ul, ur)
    cells = []
    for ll, lr, ul, ur in squares:
        cells.append((ll, lr, ur))
        cells.append((ll, ur, ul))
    cells = _longest_edge_labelling(vertices, np.array(cells))
    return _make_mesh(vertices, cells)


def uniform_refine(mesh: Mesh) -> Mesh:
    """Red refinement: every triangle is split into four similar children."""
    nv = mesh.n_vertices
    edges = mesh.edges
    ce = mesh.cell_edges
    c = mesh.cells
    mid = nv + ce  # midpoint id of the edge opposite local vertex i
    m_bc, m_ca, m_ab = mid[:, 0], mid[:, 1], mid[:, 2]
    a, b, cc = c[:, 0], c[:, 1], c[:, 2]
    children = np.stack(
        [
            np.stack([a, m_ab, m_ca], axis=1),
            np.stack([b, m_bc, m_ab], axis=1),
            np.stack([cc, m_ca, m_bc], axis=1),
            np.stack([m_ab, m_bc, m_ca], axis=1),
        ],
        axis=1,
    ).reshape(-1, 3)
    midpoints = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    vertices = np.vstack([mesh.vertices, midpoints])
    origin = np.vstack([np.column_stack([np.arange(nv), np.full(nv, -1)]), edges])
    children = _longest_edge_labelling(vertices, children)
    return _make_mesh(
        vertices,
        children,
        cell_parent=np.repeat(np.arange(mesh.n_cells), 4),
        vertex_origin=origin.astype(np.int64),
        level=mesh.level + 1,
    )


def bisect_refine(mesh: Mesh, marked, max_closure_sweeps: int | None = None) -> Mesh:
    """Newest-vertex bisection of ``marked`` cells plus conformity closure.

    Every new vertex is the midpoint of an edge of ``mesh``, so the P1 spaces
    stay nested.  A cell whose refinement edge is split is bisected once,
    and each child is bisected again if its own refinement edge (an edge of
    the parent) is split too.
    """
    marked = np.unique(np.asarray(list(marked) if not isinstance(marked, np.ndarray) else marked,
                                  dtype=np.int64))
    if marked.size and (marked.min() < 0 or marked.max() >= mesh.n_cells):
        raise ValueError("marked cell ids out of range")
    nv, nc = mesh.n_vertices, mesh.n_cells
    ce = mesh.cell_edges
    split = np.zeros(mesh.edges.shape[0], dtype=bool)
    split[ce[marked, 0]] = True

    # closure: any cell with a split edge must split its refinement edge
    limit = max_closure_sweeps if max_closure_sweeps is not None else split.size + 1
    for _ in range(limit):
        touched = split[ce].any(axis=1)
        need = ce[touched, 0]
        if split[need].all():
            break
        split[need] = True
    else:
        raise MeshError("bisection closure did not terminate")

    split_ids = np.flatnonzero(split)
    new_id = np.full(split.size, -1, dtype=np.int64)
    new_id[split_ids] = nv + np.arange(split_ids.size)
    edge_index = {tuple(e): i for i, e in zip(split_ids, mesh.edges[split_ids])}

    def midpoint(u, v):
        key = (u, v) if u < v else (v, u)
        return new_id[edge_index[key]] if key in edge_index else -1

    cells_out = []
    parent_out = []

    def bisect(cell, parent, depth):
        p, a, b = cell
        m = midpoint(a, b)
        if m < 0:
            cells_out.append(cell)
            parent_out.append(parent)
            return
        if depth > 2:
            raise MeshError("bisection recursion exceeded two levels")
        bisect((m, p, a), parent, depth + 1)
        bisect((m, b, p), parent, depth + 1)

    touched = split[ce[:, 0]]
    for ci in range(nc):
        cell = tuple(int(v) for v in mesh.cells[ci])
        if touched[ci]:
            bisect(cell, ci, 0)
        else:
            cells_out.append(cell)
            parent_out.append(ci)

    e = mesh.edges[split_ids]
    vertices = np.vstack([mesh.vertices, 0.5 * (mesh.vertices[e[:, 0]] + mesh.vertices[e[:, 1]])])
    origin = np.vstack([np.column_stack([np.arange(nv), np.full(nv, -1)]), e]).astype(np.int64)
    return _make_mesh(
        vertices,
        np.array(cells_out, dtype=np.int64).reshape(-1, 3),
        cell_parent=np.array(parent_out, dtype=np.int64),
        vertex_origin=origin,
        level=mesh.level + 1,
    )


def write_mesh_text(mesh: Mesh, path) -> None:
    """Dump as ``nv nc`` header, ``x y b`` vertex lines, ``i j k`` cell lines."""
    lines = [f"{mesh.n_vertices} {mesh.n_cells}"]
    for (x, y), b in zip(mesh.vertices, mesh.boundary_vertex):
        lines.append(f"{x:.17g} {y:.17g} {int(b)}")
    lines.extend(f"{i} {j} {k}" for i, j, k in mesh.cells)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_mesh_text(path) -> Mesh:
    """Inverse of :func:`write_mesh_text` (genealogy is not stored)."""
    rows = Path(path).read_text(encoding="utf-8").split("\n")
    nv, nc = (int(t) for t in rows[0].split())
    vdata = np.array([r.split() for r in rows[1 : 1 + nv]], dtype=float).reshape(nv, 3)
    cells = np.array([r.split() for r in rows[1 + nv : 1 + nv + nc]], dtype=np.int64).reshape(nc, 3)
    mesh = _make_mesh(vdata[:, :2], cells)
    if not np.array_equal(mesh.boundary_vertex, vdata[:, 2].astype(bool)):
        raise MeshError(f"{path}: boundary flags disagree with mesh topology")
    return mesh
