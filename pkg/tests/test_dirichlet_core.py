import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from caloric_lab.dirichlet_core import (cauchy_schwarz_check, chain_defect, energy, gamma,
                                        leibniz_defect, locality_check)
from caloric_lab.errors import PreconditionError, UsageError, ValidationError
from caloric_lab.space_builders import build_path, refine, sample

from conftest import fleet


def brute_gamma(space, u, v):
    """Double loop over the dense conductance matrix."""
    C = space.conductance_matrix().toarray()
    out = np.zeros(space.n)
    for x in range(space.n):
        for y in range(space.n):
            out[x] += C[x, y] * (u[x] - u[y]) * (v[x] - v[y])
        out[x] /= 2 * space.measure[x]
    return out


def brute_third_order(space, u, v, w):
    C = space.conductance_matrix().toarray()
    total = 0.0
    for x in range(space.n):
        for y in range(space.n):
            total += 0.5 * C[x, y] * abs((u[x] - u[y]) * (v[x] - v[y]) * (w[x] - w[y]))
    return total


def test_energy_examples():
    p3 = build_path(3)
    assert energy(p3, [0, 1, 2], [0, 1, 2]) == pytest.approx(2.0)
    p2k = build_path(2, killing=[1.0, 1.0])
    assert energy(p2k, [1, 0], [1, 0]) == pytest.approx(2.0)
    with pytest.raises(UsageError):
        energy(p3, [1, 2], [1, 2, 3])


def test_gamma_examples():
    p3 = build_path(3)
    np.testing.assert_allclose(gamma(p3, [0, 1, 2], [0, 1, 2]), [0.5, 1.0, 0.5])
    np.testing.assert_array_equal(gamma(p3, np.ones(3), [4, 1, 2]), 0.0)
    u, v = np.array([0.3, -1.0, 2.0]), np.array([1.0, 0.5, -0.2])
    np.testing.assert_allclose(gamma(p3, 2 * u, v), 2 * gamma(p3, u, v))


@pytest.mark.parametrize("name", list(fleet()))
def test_gamma_matches_brute_force(name, rng):
    s = fleet()[name]
    if s.n > 100:
        pytest.skip("brute force loop kept small")
    u, v = rng.normal(size=(2, s.n))
    np.testing.assert_allclose(gamma(s, u, v), brute_gamma(s, u, v), rtol=1e-12, atol=1e-13)


@pytest.mark.parametrize("name", list(fleet()))
def test_symmetry_and_compatibility(name, rng):
    s = fleet()[name]
    for _ in range(200):
        u, v = rng.normal(size=(2, s.n))
        e = energy(s, u, v)
        total = np.sum(gamma(s, u, v) * s.measure) + np.sum(s.killing * u * v * s.measure)
        scale = abs(e) + np.sqrt(energy(s, u, u) * energy(s, v, v))
        assert abs(total - e) <= 1e-12 * scale
        assert abs(energy(s, v, u) - e) <= 1e-12 * scale
        np.testing.assert_allclose(gamma(s, u, v), gamma(s, v, u), rtol=1e-12, atol=0)


def test_compatibility_with_killing(rng):
    s = build_path(6, rng.uniform(0.5, 2, 5), rng.uniform(0.5, 2, 6), killing=rng.uniform(0, 1, 6))
    u, v = rng.normal(size=(2, 6))
    total = np.sum(gamma(s, u, v) * s.measure) + np.sum(s.killing * u * v * s.measure)
    assert total == pytest.approx(energy(s, u, v), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 4), st.integers(0, 2 ** 32 - 1))
def test_markov_truncation(which, seed):
    s = list(fleet().values())[which]
    f = np.abs(np.random.default_rng(seed).normal(size=s.n)) * 1.5
    g = np.minimum(f, 1.0)
    assert energy(s, g, g) <= energy(s, f, f) + 1e-12


def test_leibniz_matches_unfactored_definition(rng):
    s = fleet()["gasket3"]
    u, v, w = rng.normal(size=(3, s.n))
    prod = gamma(s, u * v, w) - u * gamma(s, v, w) - v * gamma(s, u, w)
    # vertex aggregation can only cancel, never add, relative to half-edge TV
    assert np.sum(np.abs(prod) * s.measure) <= leibniz_defect(s, u, v, w) * (1 + 1e-12)
    x, y = np.concatenate([s.edges[:, 0], s.edges[:, 1]]), np.concatenate([s.edges[:, 1], s.edges[:, 0]])
    c = np.concatenate([s.cond, s.cond]) / 2
    raw = c * np.abs((u[x] * v[x] - u[y] * v[y]) * (w[x] - w[y])
                     - u[x] * (v[x] - v[y]) * (w[x] - w[y]) - v[x] * (u[x] - u[y]) * (w[x] - w[y]))
    assert leibniz_defect(s, u, v, w) == pytest.approx(raw.sum(), rel=1e-10)


def test_leibniz_p3_against_triple_difference_oracle():
    s = build_path(3)
    x = np.array([0.0, 1.0, 2.0])
    assert leibniz_defect(s, x, x, x) == pytest.approx(brute_third_order(s, x, x, x))
    assert leibniz_defect(s, x, x, x) == pytest.approx(2.0)


@pytest.mark.parametrize("name", list(fleet()))
def test_leibniz_matches_third_order_formula(name, rng):
    s = fleet()[name]
    if s.n > 100:
        pytest.skip("brute force loop kept small")
    u, v, w = rng.normal(size=(3, s.n))
    assert leibniz_defect(s, u, v, w) == pytest.approx(brute_third_order(s, u, v, w), rel=1e-12)


@pytest.mark.parametrize("name", list(fleet()))
def test_defects_vanish_for_constant_arguments(name, rng):
    s = fleet()[name]
    u, v = rng.normal(size=(2, s.n))
    c = np.full(s.n, 2.5)
    assert leibniz_defect(s, c, u, v) == 0.0
    assert leibniz_defect(s, u, c, v) == 0.0
    assert leibniz_defect(s, u, v, c) == 0.0
    assert chain_defect(s, np.sin, np.cos, c, u) == 0.0
    assert chain_defect(s, np.sin, np.cos, u, c) == 0.0


def test_chain_defect_examples():
    s = build_path(3)
    u = np.array([0.0, 1.0, 2.0])
    assert chain_defect(s, lambda t: t, np.ones_like, u, u) == 0.0
    # oracle: |(u_x^2 - u_y^2) - 2 u_x (u_x - u_y)| |u_x - u_y| = |u_x - u_y|^3 per half-edge
    assert chain_defect(s, np.square, lambda t: 2 * t, u, u) == pytest.approx(
        brute_third_order(s, u, u, u))
    with pytest.raises(ValidationError):
        chain_defect(s, np.cos, lambda t: -np.sin(t), u, u)


def loglog_slope(h, vals):
    return np.polyfit(np.log(h), np.log(vals), 1)[0]


def test_defects_decay_at_first_order():
    fam = refine("path", 5, n0=9)
    h = np.array(fam.mesh_widths)
    leib, chain = [], []
    for s in fam.spaces:
        u = sample(s, lambda x: np.sin(2 * np.pi * x) + x)
        v = sample(s, lambda x: np.cos(3 * x))
        w = sample(s, lambda x: x ** 2)
        leib.append(leibniz_defect(s, u, v, w))
        chain.append(chain_defect(s, np.sin, np.cos, u, v))
    for vals in (leib, chain):
        ratios = np.array(vals[:-1]) / np.array(vals[1:])
        assert np.all(np.abs(ratios[-2:] - 2) <= 0.5)
        assert loglog_slope(h, vals) >= 0.75


def test_cauchy_schwarz_forms(rng):
    s = build_path(3)
    u = rng.normal(size=3)
    f = rng.normal(size=3)
    rep = cauchy_schwarz_check(s, f, f, u, u, 1.0)
    assert rep.ok and abs(rep.rows[0].margin) <= 1e-12
    for C in (0.1, 1.0, 10.0):
        f, g, u, v = rng.normal(size=(4, 3))
        assert cauchy_schwarz_check(s, f, g, u, v, C).ok
    with pytest.raises(UsageError):
        cauchy_schwarz_check(s, f, g, u, v, 0.0)


@pytest.mark.parametrize("name", list(fleet()))
def test_cauchy_schwarz_random(name, rng):
    s = fleet()[name]
    for C in (0.1, 1.0, 10.0):
        f, g, u, v = rng.normal(size=(4, s.n))
        rep = cauchy_schwarz_check(s, f, g, u, v, C)
        assert rep.ok, rep.rows


def test_locality():
    s = build_path(5)
    U = s.subset([2])
    u = np.array([3.0, -1.0, 4.0, 1.0, 5.0])
    assert locality_check(s, u, np.full(5, 7.0), U) == 0.0
    assert locality_check(s, u, np.array([9.0, 2.0, 2.0, 2.0, -3.0]), U) == 0.0
    with pytest.raises(PreconditionError):
        locality_check(s, u, np.array([9.0, 2.0, 2.0, 2.5, -3.0]), U)
