from collections import Counter

import numpy as np
import pytest

from semilinear_fmg.mesh import (
    MeshError,
    bisect_refine,
    l_shaped_mesh,
    read_mesh_text,
    uniform_refine,
    unit_square_mesh,
    write_mesh_text,
)


def brute_force_edge_counts(mesh):
    counts = Counter()
    for tri in mesh.cells.tolist():
        for i in range(3):
            a, b = tri[i], tri[(i + 1) % 3]
            counts[(min(a, b), max(a, b))] += 1
    return counts


def assert_conforming(mesh):
    counts = brute_force_edge_counts(mesh)
    assert set(counts.values()) <= {1, 2}
    assert np.all(mesh.signed_areas > 0)
    # a hanging node lies strictly inside some edge
    X = mesh.vertices
    for a, b in counts:
        d = X[b] - X[a]
        t = (X - X[a]) @ d / (d @ d)
        off = np.abs((X[:, 0] - X[a, 0]) * d[1] - (X[:, 1] - X[a, 1]) * d[0])
        inside = (t > 1e-12) & (t < 1 - 1e-12) & (off < 1e-12)
        assert not inside.any()


def assert_boundary_flags(mesh):
    counts = brute_force_edge_counts(mesh)
    on_boundary = np.zeros(mesh.n_vertices, dtype=bool)
    for (a, b), n in counts.items():
        if n == 1:
            on_boundary[[a, b]] = True
    assert np.array_equal(on_boundary, mesh.boundary_vertex)


def assert_nested(coarse, fine):
    origin = fine.vertex_origin
    assert origin.shape == (fine.n_vertices, 2)
    for v, (a, b) in enumerate(origin):
        if b < 0:
            np.testing.assert_allclose(fine.vertices[v], coarse.vertices[a], atol=1e-14, rtol=0)
        else:
            mid = 0.5 * (coarse.vertices[a] + coarse.vertices[b])
            np.testing.assert_allclose(fine.vertices[v], mid, atol=1e-14, rtol=0)
            assert (min(a, b), max(a, b)) in brute_force_edge_counts(coarse)


def cell_angles(mesh):
    p = mesh.vertices[mesh.cells]
    out = []
    for i in range(3):
        u = p[:, (i + 1) % 3] - p[:, i]
        v = p[:, (i + 2) % 3] - p[:, i]
        cos = np.einsum("cd,cd->c", u, v) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
        out.append(np.arccos(np.clip(cos, -1, 1)))
    return np.unique(np.round(np.concatenate(out), 12))


@pytest.mark.parametrize("n, nv, nc", [(1, 4, 2), (2, 9, 8), (4, 25, 32)])
def test_unit_square_counts(n, nv, nc):
    mesh = unit_square_mesh(n)
    assert mesh.n_vertices == nv
    assert mesh.n_cells == nc
    assert abs(mesh.total_area - 1.0) < 1e-14
    assert_conforming(mesh)
    assert_boundary_flags(mesh)


@pytest.mark.parametrize("n", [0, -1, 1.5])
def test_unit_square_rejects_bad_size(n):
    with pytest.raises(ValueError):
        unit_square_mesh(n)


def test_l_shape():
    mesh = l_shaped_mesh()
    assert mesh.n_vertices == 8
    assert mesh.n_cells == 6
    corner = int(np.flatnonzero(np.all(mesh.vertices == 0.0, axis=1))[0])
    assert mesh.boundary_vertex[corner]
    assert abs(mesh.total_area - 3.0) < 1e-14
    assert mesh.boundary_vertex.all()
    assert_conforming(mesh)
    assert_boundary_flags(mesh)


def test_newest_vertex_is_opposite_longest_edge():
    for mesh in (unit_square_mesh(3), l_shaped_mesh()):
        p = mesh.vertices[mesh.cells]
        opposite = [np.linalg.norm(p[:, (i + 1) % 3] - p[:, (i + 2) % 3], axis=1) for i in range(3)]
        assert np.all(opposite[0] >= np.maximum(opposite[1], opposite[2]) - 1e-14)


def test_uniform_refine_two_cell_square():
    fine = uniform_refine(unit_square_mesh(1))
    assert fine.n_cells == 8
    assert fine.n_vertices == 9


@pytest.mark.parametrize("make", [lambda: unit_square_mesh(1), lambda: unit_square_mesh(3), l_shaped_mesh])
def test_uniform_refine_properties(make):
    coarse = make()
    fine = uniform_refine(coarse)
    assert abs(fine.h_max / coarse.h_max - 0.5) < 1e-14
    assert fine.n_vertices == coarse.n_vertices + len(brute_force_edge_counts(coarse))
    assert fine.n_cells == 4 * coarse.n_cells
    assert abs(fine.total_area - coarse.total_area) < 1e-12
    assert np.array_equal(np.bincount(fine.cell_parent), np.full(coarse.n_cells, 4))
    assert fine.level == coarse.level + 1
    assert_conforming(fine)
    assert_boundary_flags(fine)
    assert_nested(coarse, fine)
    np.testing.assert_array_equal(cell_angles(fine), cell_angles(coarse))


def test_bisect_nothing_marked_is_identity():
    mesh = unit_square_mesh(2)
    out = bisect_refine(mesh, set())
    assert np.array_equal(out.vertices, mesh.vertices)
    assert np.array_equal(out.cells, mesh.cells)


def test_bisect_all_cells_of_two_cell_square():
    mesh = unit_square_mesh(1)
    out = bisect_refine(mesh, {0, 1})
    assert_conforming(out)
    assert_nested(mesh, out)
    assert np.all(np.bincount(out.cell_parent, minlength=mesh.n_cells) >= 2)


def test_bisect_rejects_out_of_range():
    with pytest.raises(ValueError):
        bisect_refine(unit_square_mesh(1), [5])


@pytest.mark.parametrize("seed", range(6))
def test_bisect_random_marking_stays_conforming_and_nested(seed):
    rng = np.random.default_rng(seed)
    mesh = l_shaped_mesh() if seed % 2 else unit_square_mesh(2)
    area = mesh.total_area
    for _ in range(5):
        k = max(1, mesh.n_cells // 5)
        marked = rng.choice(mesh.n_cells, size=k, replace=False)
        fine = bisect_refine(mesh, marked)
        assert_conforming(fine)
        assert_boundary_flags(fine)
        assert_nested(mesh, fine)
        assert abs(fine.total_area - area) < 1e-12
        # marked cells are split
        assert np.all(np.bincount(fine.cell_parent, minlength=mesh.n_cells)[marked] >= 2)
        mesh = fine


def test_bisect_shape_regularity_is_bounded():
    # newest-vertex bisection creates at most four similarity classes per initial triangle
    mesh = unit_square_mesh(1)
    for _ in range(12):
        corner = np.flatnonzero(np.any(np.all(mesh.vertices[mesh.cells] == 0.0, axis=2), axis=1))
        mesh = bisect_refine(mesh, corner)
    assert len(cell_angles(mesh)) <= 8


def test_mesh_text_round_trip(tmp_path):
    mesh = bisect_refine(uniform_refine(l_shaped_mesh()), [0, 3])
    path = tmp_path / "mesh.txt"
    write_mesh_text(mesh, path)
    text = path.read_text().splitlines()
    assert text[0] == f"{mesh.n_vertices} {mesh.n_cells}"
    assert len(text) == 1 + mesh.n_vertices + mesh.n_cells
    back = read_mesh_text(path)
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.cells, mesh.cells)
    assert np.array_equal(back.boundary_vertex, mesh.boundary_vertex)


def test_mesh_text_rejects_wrong_boundary_flags(tmp_path):
    path = tmp_path / "mesh.txt"
    path.write_text("3 1\n0 0 1\n1 0 1\n0 1 0\n0 1 2\n")
    with pytest.raises(MeshError):
        read_mesh_text(path)
