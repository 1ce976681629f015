import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from caloric_lab.dirichlet_core import energy
from caloric_lab.errors import ResourceError, UsageError, ValidationError
from caloric_lab.space_builders import (build_cycle, build_gasket,
                                        build_grid2d, build_path, build_product, refine,
                                        space_from_json, space_to_json)

from conftest import fleet


def dense_laplacian(space):
    return space.laplacian().toarray()


def test_path3_generator_rows():
    P = build_path(3).generator().toarray()
    np.testing.assert_array_equal(P, [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])


def test_path3_eigenvalues_from_characteristic_polynomial():
    # det(P - x) = -x^3 + 4x^2 - 3x for the unit P3 generator
    roots = np.sort(np.roots([-1, 4, -3, 0]).real)
    lam = np.linalg.eigvalsh(build_path(3).generator().toarray())
    np.testing.assert_allclose(lam, roots, atol=1e-12)
    np.testing.assert_allclose(roots, [0, 1, 3], atol=1e-12)


def test_path2_single_edge_energy():
    s = build_path(2)
    assert energy(s, [3.0, 1.0], [3.0, 1.0]) == pytest.approx(4.0)


def test_path_rejects_nonpositive_profiles():
    with pytest.raises(ValidationError):
        build_path(3, conductance=[1.0, 0.0])
    with pytest.raises(ValidationError):
        build_path(3, measure=-1.0)
    with pytest.raises(ValidationError):
        build_path(1)


def test_grid_identity_is_five_point_stencil():
    s = build_grid2d(3, 3, np.eye(2), 1.0)
    # hand-assembled 5-point stencil: neighbours in row-major order
    L = np.zeros((9, 9))
    for j, i in itertools.product(range(3), range(3)):
        for di, dj in ((1, 0), (0, 1)):
            if i + di < 3 and j + dj < 3:
                a, b = j * 3 + i, (j + dj) * 3 + i + di
                L[a, b] = L[b, a] = -1.0
    L[np.diag_indices(9)] = -L.sum(axis=1)
    np.testing.assert_array_equal(dense_laplacian(s), L)
    np.testing.assert_array_equal(s.measure, [.25, .5, .25, .5, 1, .5, .25, .5, .25])


def test_grid_coefficient_scaling_and_anisotropy():
    base = build_grid2d(4, 3, np.eye(2), 0.5)
    double = build_grid2d(4, 3, 2 * np.eye(2), 0.5)
    np.testing.assert_allclose(double.cond, 2 * base.cond)
    aniso = build_grid2d(4, 3, np.diag([1.0, 4.0]), 0.5)
    e = aniso.edges
    horizontal = (e[:, 1] - e[:, 0]) == 1
    np.testing.assert_allclose(aniso.cond[horizontal], 1.0)
    np.testing.assert_allclose(aniso.cond[~horizontal], 4.0)


def test_grid_ellipticity_error_names_cell():
    a = np.broadcast_to(np.eye(2), (2, 2, 2, 2)).copy()
    a[1, 0] = [[1.0, 0.0], [0.0, -1.0]]
    with pytest.raises(ValidationError, match=r"i=0, j=1"):
        build_grid2d(3, 3, a, 1.0)
    with pytest.raises(ValidationError, match="ellipticity"):
        build_grid2d(3, 3, 5 * np.eye(2), 1.0, ellipticity=(0.1, 2.0))


def test_grid_offdiagonal_energy_on_linear_functions():
    # Axis edges on the boundary carry full weight, so a linear function sees
    # one extra row of axis edges: E = (1 + h) axis part + diagonal part.
    a = np.array([[2.0, 0.5], [0.5, 1.0]])
    grad = np.array([0.7, -1.3])
    errors = []
    for h, n in ((0.2, 6), (0.1, 11), (0.05, 21)):
        s = build_grid2d(n, n, a, h)
        f = s.coords @ grad
        axis = (a[0, 0] - 0.5) * grad[0] ** 2 + (a[1, 1] - 0.5) * grad[1] ** 2
        diag = 0.5 * (grad[0] + grad[1]) ** 2
        assert energy(s, f, f) == pytest.approx((1 + h) * axis + diag, rel=1e-12)
        errors.append(abs(energy(s, f, f) - grad @ a @ grad))
    assert errors[0] / errors[1] == pytest.approx(2.0) and errors[1] / errors[2] == pytest.approx(2.0)


def test_gasket_counts():
    for level, (nv, ne) in {0: (3, 3), 1: (6, 9), 2: (15, 27), 3: (42, 81)}.items():
        g = build_gasket(level)
        assert (g.n, len(g.edges)) == (nv, ne)
        assert g.measure.sum() == pytest.approx(1.0)
    with pytest.raises(ResourceError):
        build_gasket(8)


def test_gasket_level1_harmonic_extension_energy():
    g = build_gasket(1)
    L = dense_laplacian(g)
    boundary = np.array([0, 1, 2])
    inner = np.setdiff1d(np.arange(g.n), boundary)
    # oracle: the three interior values solve the 3x3 system L_II u = -L_IB b
    b = np.array([1.0, 0.0, 0.0])
    u_int = np.linalg.solve(L[np.ix_(inner, inner)], -L[np.ix_(inner, boundary)] @ b)
    f = np.zeros(g.n)
    f[boundary], f[inner] = b, u_int
    # the classical 2/5, 2/5, 1/5 rule for midpoints
    assert sorted(np.round(u_int, 12)) == [0.2, 0.4, 0.4]
    level0 = build_gasket(0)
    assert energy(g, f, f) == pytest.approx(energy(level0, b, b), rel=1e-12)
    assert energy(level0, b, b) == pytest.approx(2.0)


@pytest.mark.parametrize("level", [1, 2, 3])
def test_gasket_energy_consistent_across_levels(level, rng):
    coarse, fine = build_gasket(level), build_gasket(level + 1)
    # coarse vertices sit at the same coordinates in the fine graph
    lookup = {tuple(np.round(p, 9)): i for i, p in enumerate(fine.coords)}
    emb = np.array([lookup[tuple(np.round(p, 9))] for p in coarse.coords])
    L = dense_laplacian(fine)
    rest = np.setdiff1d(np.arange(fine.n), emb)
    fc = rng.normal(size=coarse.n)
    # harmonic part of a coarse function: minimise the fine energy with fixed nodes
    Lc = dense_laplacian(coarse)
    bnd = np.array([0, 1, 2])
    inner_c = np.setdiff1d(np.arange(coarse.n), bnd)
    fc[inner_c] = np.linalg.solve(Lc[np.ix_(inner_c, inner_c)], -Lc[np.ix_(inner_c, bnd)] @ fc[bnd])
    ff = np.zeros(fine.n)
    ff[emb] = fc
    ff[rest] = np.linalg.solve(L[np.ix_(rest, rest)], -L[np.ix_(rest, emb)] @ fc)
    assert energy(fine, ff, ff) == pytest.approx(energy(coarse, fc, fc), rel=1e-10)


def test_product_of_two_paths_is_four_cycle():
    p = build_product([build_path(2), build_path(2)], [1.0, 1.0])
    A = p.conductance_matrix().toarray()
    assert np.all(A.sum(axis=1) == 2) and np.all(p.measure == 1)
    assert p.n_components() == 1 and len(p.edges) == 4
    weighted = build_product([build_path(2), build_path(2)], [2.0, 1.0])
    first = weighted.edges[:, 1] - weighted.edges[:, 0] == 2
    np.testing.assert_array_equal(weighted.cond[first], 2.0)
    np.testing.assert_array_equal(weighted.cond[~first], 1.0)


def test_product_single_factor_is_identity():
    f = build_path(5, [1, 2, 3, 4], [1, 1, 2, 2, 3])
    p = build_product([f], [1.0])
    np.testing.assert_array_equal(p.laplacian().toarray(), f.laplacian().toarray())
    np.testing.assert_array_equal(p.measure, f.measure)


def test_product_permutation_invariance(rng):
    f = build_path(4, [1.0, 2.0, 0.5], [1.0, 0.5, 2.0, 1.0])
    p = build_product([f, f], [1.5, 1.5])
    g = rng.normal(size=(4, 4))
    perm = g.T.ravel()
    assert energy(p, g.ravel(), g.ravel()) == pytest.approx(energy(p, perm, perm), rel=1e-12)


def test_product_caps():
    with pytest.raises(ResourceError):
        build_product([build_path(2)] * 4, [1.0] * 4)
    with pytest.raises(ResourceError):
        build_product([build_path(100), build_path(100)], [1.0, 1.0])


def test_refine_schedules():
    fam = refine("path", 3, n0=9)
    assert fam.mesh_widths == (1 / 8, 1 / 16, 1 / 32)
    assert [s.n for s in fam.spaces] == [9, 17, 33]
    grids = refine("grid2d", 2, n0=5)
    assert [(s.metadata["nx"], s.metadata["ny"]) for s in grids.spaces] == [(5, 5), (9, 9)]
    with pytest.raises(UsageError):
        refine("gasket", 2)


@pytest.mark.parametrize("kind", ["path", "grid2d"])
def test_embedding_preserves_nodes(kind, rng):
    fam = refine(kind, 3, n0=5)
    for lev in range(2):
        f = rng.normal(size=fam.spaces[lev].n)
        g = fam.embed(lev, f)
        assert np.max(np.abs(g[fam.injections[lev]] - f)) == 0.0
        np.testing.assert_allclose(fam.spaces[lev + 1].coords[fam.injections[lev]],
                                   fam.spaces[lev].coords)


def test_json_round_trip_is_bit_exact():
    for s in fleet().values():
        text = space_to_json(s)
        t = space_from_json(text)
        assert np.array_equal(t.measure, s.measure) and np.array_equal(t.cond, s.cond)
        assert space_to_json(t) == text


def test_loader_validates_connectivity():
    s = build_path(3)
    bad = space_to_json(s).replace('[1,2,"0x1.0000000000000p+0"]', "")
    with pytest.raises(ValidationError):
        space_from_json(bad.replace(",]", "]"))


def test_cycle_is_regular():
    c = build_cycle(7)
    assert np.all(c.degree() == 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 4), st.integers(0, 2 ** 32 - 1))
def test_energy_nonnegative_and_constants_harmonic(which, seed):
    space = list(fleet().values())[which]
    rng = np.random.default_rng(seed)
    f, g = rng.normal(size=(2, space.n))
    ef = energy(space, f, f)
    assert ef >= -1e-12 * np.dot(f, f)
    assert abs(energy(space, np.ones(space.n), g)) <= 1e-12 * np.abs(g).sum() * space.cond.max()
