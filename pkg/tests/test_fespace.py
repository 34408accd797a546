import numpy as np
import pytest

from semilinear_fmg.assemble import assemble_stiffness, energy_norm
from semilinear_fmg.fespace import build_fespace, interpolate, prolongation, to_vertex_values
from semilinear_fmg.mesh import bisect_refine, l_shaped_mesh, uniform_refine, unit_square_mesh


def evaluate_p1(space, u, points):
    """Evaluate the P1 function by locating each point in some cell (independent of genealogy)."""
    mesh = space.mesh
    vals = to_vertex_values(space, u)
    p = mesh.vertices[mesh.cells]
    T = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # (nc, 2, 2)
    Tinv = np.linalg.inv(T)
    out = np.empty(len(points))
    for i, q in enumerate(points):
        lam12 = np.einsum("cij,cj->ci", Tinv, q - p[:, 0])
        lam = np.column_stack([1 - lam12.sum(axis=1), lam12])
        c = int(np.argmax(lam.min(axis=1)))
        assert lam[c].min() > -1e-12
        out[i] = lam[c] @ vals[mesh.cells[c]]
    return out


@pytest.mark.parametrize("mesh, n_free", [(unit_square_mesh(2), 1), (unit_square_mesh(4), 9),
                                          (l_shaped_mesh(), 0)])
def test_free_dof_counts(mesh, n_free):
    space = build_fespace(mesh)
    assert space.n_free == n_free
    assert np.array_equal(np.sort(np.concatenate([space.free_dofs, space.fixed_dofs])),
                          np.arange(mesh.n_vertices))
    assert np.array_equal(space.free_dofs, np.flatnonzero(~mesh.boundary_vertex))
    assert np.all(np.diff(space.free_dofs) > 0)


def test_interpolate_examples():
    space = build_fespace(unit_square_mesh(2))
    assert np.array_equal(interpolate(space, lambda x, y: 0.0 * x), np.zeros(1))
    u = interpolate(space, lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y))
    assert u.shape == (1,) and abs(u[0] - 1.0) < 1e-15


def test_interpolate_affine_at_barycenters():
    space = build_fespace(unit_square_mesh(4))

    def affine(x, y):
        return 0.3 + 2.0 * x - 1.5 * y

    u = interpolate(space, affine)
    mesh = space.mesh
    interior = np.flatnonzero(~mesh.boundary_vertex[mesh.cells].any(axis=1))
    assert interior.size > 0
    centers = mesh.vertices[mesh.cells[interior]].mean(axis=1)
    values = to_vertex_values(space, u)[mesh.cells[interior]].mean(axis=1)
    np.testing.assert_allclose(values, affine(centers[:, 0], centers[:, 1]), rtol=0, atol=1e-14)


def refinement_pairs():
    sq = unit_square_mesh(4)
    ls = uniform_refine(l_shaped_mesh())
    return [
        ("uniform-square", sq, uniform_refine(sq)),
        ("uniform-lshape", ls, uniform_refine(ls)),
        ("bisect-square", sq, bisect_refine(sq, [0, 5, 17, 30])),
        ("bisect-lshape", ls, bisect_refine(ls, np.arange(0, ls.n_cells, 3))),
    ]


@pytest.mark.parametrize("name, coarse_mesh, fine_mesh", refinement_pairs(), ids=lambda v: v if isinstance(v, str) else "")
def test_prolongation_is_the_embedding(name, coarse_mesh, fine_mesh, rng):
    coarse, fine = build_fespace(coarse_mesh), build_fespace(fine_mesh)
    P = prolongation(coarse, fine)
    assert P.shape == (fine.n_free, coarse.n_free)
    c = rng.standard_normal(coarse.n_free)
    fine_pts = fine.dof_coordinates
    np.testing.assert_allclose(P @ c, evaluate_p1(coarse, c, fine_pts), rtol=0, atol=1e-13)

    # identity on inherited nodes
    origin = fine_mesh.vertex_origin[fine.free_dofs]
    inherited = origin[:, 1] < 0
    np.testing.assert_array_equal((P @ c)[inherited], c[coarse.vertex_to_free[origin[inherited, 0]]])

    # row sums by classification of the genealogy
    sums = np.asarray(P.sum(axis=1)).ravel()
    n_free_parents = np.where(inherited, 1,
                              (coarse.vertex_to_free[origin[:, 0]] >= 0).astype(int)
                              + (coarse.vertex_to_free[np.maximum(origin[:, 1], 0)] >= 0).astype(int))
    expected = np.where(inherited, 1.0, 0.5 * n_free_parents)
    np.testing.assert_array_equal(sums, expected)

    # the embedded function is identical, so its energy is too
    Ac, Af = assemble_stiffness(coarse), assemble_stiffness(fine)
    assert abs(energy_norm(Af, P @ c) - energy_norm(Ac, c)) < 1e-12 * max(1.0, energy_norm(Ac, c))

    # two-level Galerkin identity
    G = (P.T @ Af @ P - Ac).toarray()
    assert np.abs(G).max() < 1e-10


def test_prolongation_needs_genealogy():
    coarse = build_fespace(unit_square_mesh(2))
    with pytest.raises(ValueError):
        prolongation(coarse, build_fespace(unit_square_mesh(4)))
