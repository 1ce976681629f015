import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from caloric_lab import ancient_structure as an
from caloric_lab.cutoff_toolkit import build_exhaustion, certify_cutoff
from caloric_lab.errors import PreconditionError, UsageError, ValidationError
from caloric_lab.space_builders import (VertexSubset, build_path, build_torus,
                                        disjoint_union)


def second_difference(coeffs):
    """Exact integer coefficients of p(x+1) - 2p(x) + p(x-1) for p = sum c_j x^j."""
    out = [0] * max(len(coeffs), 1)
    for j, c in enumerate(coeffs):
        for i in range(j - 2, -1, -2):  # odd offsets cancel
            out[i] += 2 * c * math.comb(j, i)
    return out


def poly_eval(coeffs, x):
    return sum(c * x ** j for j, c in enumerate(coeffs))


def symbolic_caloric(coeffs):
    """u_k as integer-rational coefficient lists via u_{k+1} = Delta u_k / (k + 1)."""
    from fractions import Fraction
    seq = [[Fraction(c) for c in coeffs]]
    while any(seq[-1]):
        k = len(seq) - 1
        seq.append([c / (k + 1) for c in second_difference(seq[-1])])
    return seq[:-1] if len(seq) > 1 else seq


@pytest.fixture(scope="module")
def lattice():
    p = build_path(601)
    x = an.lattice_position(p)
    V = VertexSubset.of(p, indices=range(295, 306))
    ex = build_exhaustion(p, V, 1 / 16, 1.0, max_sets=12)
    return p, x, V, ex


@pytest.fixture(scope="module")
def family(lattice):
    p, x, V, ex = lattice
    return an.exhaustion_family(p, V, depth=16)


def test_recursion_examples(lattice):
    p, x, V, ex = lattice
    q = an.make_caloric_polynomial(p, x ** 2)
    assert q.degree == 1
    np.testing.assert_array_equal(q.coefficients[1][q.domain], 2.0)
    assert an.make_caloric_polynomial(p, x).degree == 0
    q4 = an.make_caloric_polynomial(p, x ** 4)
    assert q4.degree == 2
    np.testing.assert_array_equal(q4.coefficients[1][q4.domain], (12 * x ** 2 + 2)[q4.domain])
    np.testing.assert_array_equal(q4.coefficients[2][q4.domain], 12.0)
    # each application of P removes one vertex at either end of the path
    assert np.all(np.diff(q4.window_sizes) == -2)
    assert q4.shrink == 3 and q4.defect < 1e-10
    assert q4.metadata["gate"]["ok"]
    np.testing.assert_allclose(q4.taylor_coefficients()[2], 2 * q4.coefficients[2])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(-5, 5), min_size=1, max_size=7))
def test_recursion_matches_symbolic_oracle(coeffs):
    p = build_path(121)
    x = an.lattice_position(p)
    q = an.make_caloric_polynomial(p, poly_eval(coeffs, x.astype(float)), check_gate=False)
    oracle = symbolic_caloric(coeffs)
    assert q.degree == len(oracle) - 1
    assert q.defect < 1e-10
    for k, c in enumerate(oracle):
        want = np.array([float(poly_eval(c, int(v))) for v in x])
        np.testing.assert_allclose(q.coefficients[k][q.domain], want[q.domain], rtol=0,
                                   atol=1e-9 * max(1.0, np.abs(want).max()))


def test_window_exhaustion_and_precision_guard():
    p = build_path(7)
    x = an.lattice_position(p)
    with pytest.raises(ValidationError, match="longer lattice"):
        an.make_caloric_polynomial(p, x ** 6)
    big = build_path(2001)
    xb = an.lattice_position(big)
    with pytest.raises(ValidationError, match="gate"):
        an.make_caloric_polynomial(big, xb ** 6)
    with pytest.raises(ValidationError, match="d_max"):
        an.make_caloric_polynomial(build_path(41), np.exp(an.lattice_position(build_path(41)) / 9),
                                   d_max=3)


def test_lattice_position_requires_path():
    with pytest.raises(ValidationError):
        an.lattice_position(build_torus([4, 4]))
    np.testing.assert_array_equal(an.lattice_position(build_path(5)), [-2, -1, 0, 1, 2])


def test_exponential_examples(lattice):
    p, x, V, ex = lattice
    const = an.make_exponential_ancient(p, 0.0)
    assert const.metadata["mu"] == 0.0
    np.testing.assert_array_equal(const.at([-3.0, 0.0])[:, const.domain], 1.0)
    u = an.make_exponential_ancient(p, 1.0, window=np.abs(x) <= 200)
    assert u.metadata["mu"] == pytest.approx(1.08616, abs=1e-5)
    assert u.metadata["gate"]["ok"]
    t = np.array([-2.0, -0.5])
    for k in range(4):
        np.testing.assert_allclose(u.at(t, k), u.metadata["mu"] ** k * u.at(t), rtol=1e-14)
    with pytest.raises(ValidationError, match="exponent"):
        an.make_exponential_ancient(build_path(2001), 1.0)
    with pytest.raises(ValidationError):
        an.make_exponential_ancient(p, 2.5)


def test_exponential_growth_rate(lattice):
    p, x, V, ex = lattice
    theta = 1.0
    u = an.make_exponential_ancient(p, theta, window=np.abs(x) <= 200)
    prof = an.growth_profile(p, u, {1: ex}, T_list=(1.0, 2.0, 4.0, 8.0, 16.0))
    fit = an.fit_exponential_growth(prof).fit
    hop_scale = ex.widths[0]  # hops added per exhaustion step
    assert fit["c_u"] == pytest.approx(theta * hop_scale, rel=0.1)
    mu = u.metadata["mu"]
    assert fit["c_u"] == pytest.approx(max(mu, theta * hop_scale), rel=0.1)
    integ = prof.values[:, :, 0] ** 2
    TT, II = np.meshgrid(prof.T_list, prof.i_list, indexing="ij")
    big = TT > 1
    assert np.all(integ[big] <= np.exp(fit["c_dominating"] * (TT + II))[big] * (1 + 1e-12))


def test_caccioppoli_constants():
    assert an.caccioppoli_constants(1.0, 1.0) == (400.0, 4800.0)
    assert an.iterated_coefficient(1.0, 1.0, 1) == 4800.0
    assert an.iterated_coefficient(1.0, 1.0, 2) == 23_040_000.0
    assert an.caccioppoli_constants(0.5, 2.0) == (200.0, 1200.0)


def test_caccioppoli_quadratic_against_closed_form(lattice):
    p, x, V, ex = lattice
    u = an.make_caloric_polynomial(p, x ** 2).field()
    rep = an.caccioppoli_check(p, u, ex, J=(-1.0, 0.0), r=1.0, i=1)
    assert rep.ok and rep.summary["K1"] == 400.0 and rep.summary["K2"] == 4800.0
    ints = rep.summary["integrals"]
    assert set(ints) == {"dtu_sq", "gamma", "killing", "middle", "outer_mass"}
    W1, W3, W4 = (ex.sets[j].members for j in (0, 2, 3))
    assert ints["dtu_sq"] == pytest.approx(4.0 * W1.sum(), rel=1e-13)
    # edge jumps of x^2 + 2t are 2x + 1, independent of t; interval J-r has length 2
    xs = x[W3]
    lo, hi = int(xs.min()), int(xs.max())
    half = 0.5 * (sum((2 * v + 1) ** 2 for v in range(lo - 1, hi + 1))
                  + sum((2 * v + 1) ** 2 for v in range(lo, hi)))
    assert ints["gamma"] == pytest.approx(2.0 * half, rel=1e-13)
    assert ints["killing"] == 0.0
    mass = sum(((v ** 2 - 6) ** 3 - v ** 6) / -6.0 for v in x[W4])  # int_{-3}^0 (v^2 + 2t)^2 dt
    assert ints["outer_mass"] == pytest.approx(mass, rel=1e-12)


def test_caccioppoli_fleet_and_iteration(lattice):
    p, x, V, ex = lattice
    fleet = {"quadratic": an.make_caloric_polynomial(p, x ** 2).field(),
             "quartic": an.make_caloric_polynomial(p, x ** 4).field(),
             "exponential": an.make_exponential_ancient(p, 1.0, window=np.abs(x) <= 200)}
    rep = an.caccioppoli_sweep(p, fleet, ex, i_list=(1, 2), r_list=(0.5, 1.0),
                               J_list=((-1.0, 0.0), (-2.0, -0.5)), k_list=(1, 2))
    assert rep.counts()["FAIL"] == 0 and rep.counts()["PASS"] > 0
    it = an.caccioppoli_iterate(p, fleet["quartic"], ex, k=2)
    assert it.summary["coefficient"] == 23_040_000.0 and it.ok
    # the quartic field has d_t^2 u = 24, so the k = 2 lhs is 576 |W_1| |J|
    assert it.summary["integrals"]["dtku_sq"] == pytest.approx(576 * len(ex.sets[0]), rel=1e-12)


def test_caccioppoli_harmonic_and_preconditions(lattice):
    p, x, V, ex = lattice
    h = an.make_caloric_polynomial(p, x).field()
    rep = an.caccioppoli_check(p, h, ex)
    assert rep.summary["integrals"]["dtu_sq"] == 0.0 and rep.ok
    assert an.caccioppoli_iterate(p, h, ex, k=3).rows[0].lhs == 0.0
    shallow = build_exhaustion(p, V, 1 / 16, 1.0, max_sets=3)
    with pytest.raises(PreconditionError, match="W_4"):
        an.caccioppoli_check(p, h, shallow)
    loose = build_exhaustion(p, V, 0.2, 1.0, max_sets=8)
    with pytest.raises(PreconditionError, match="1/16"):
        an.caccioppoli_check(p, h, loose)
    with pytest.raises(PreconditionError, match="c2"):
        an.caccioppoli_check(p, h, ex, C=0.1)
    narrow = an.make_exponential_ancient(p, 1.0, window=np.abs(x) <= 6)
    with pytest.raises(PreconditionError, match="window"):
        an.caccioppoli_check(p, narrow, ex)
    sweep = an.caccioppoli_sweep(p, {"h": h}, ex, i_list=(8,), k_list=(2,))
    assert sweep.counts()["SKIP"] == 1


def test_gate_rejects_non_solutions(lattice):
    p, x, V, ex = lattice
    u = an.make_caloric_polynomial(p, x ** 2).field()
    fake = an.SpaceTimeField(u.grid, lambda t, k: u.provider(t, k) * (1.0 if k == 0 else 1.5),
                             u.domain, None, "analytic", {"ancient": True})
    with pytest.raises(PreconditionError, match="gate"):
        an.caccioppoli_check(p, fake, ex)


def test_technical_lemma(lattice):
    p, x, V, ex = lattice
    u = an.make_caloric_polynomial(p, x ** 2).field()
    cert = ex.cutoffs[1]
    rep = an.technical_lemma_check(p, u, cert, J=(-1.0, 0.0), r=1.0)
    assert rep.ok
    assert rep.summary["C0"] == pytest.approx(3 * cert.c2 + 1.0)
    assert rep.summary["ratio"] <= rep.summary["C0"]
    assert rep.summary["l_slope"] <= 2.0
    # direct oracle: fine Simpson in time on the same integrand
    from scipy.integrate import simpson
    phi = cert.values
    gphi = np.array([0.5 * sum((phi[v] - phi[w]) ** 2 for w in (v - 1, v + 1) if 0 <= w < p.n)
                     for v in range(p.n)])
    t = np.linspace(-2.0, 0.0, 4001)
    l = an.TimeRamp(-1.0, 1.0)(t)
    U2 = u.at(t) ** 2
    lhs = simpson(l ** 4 * (U2 @ (phi ** 2 * gphi)), x=t)
    mass = simpson(l ** 2 * (U2 @ phi ** 2), x=t)
    assert rep.summary["lhs"] == pytest.approx(lhs, rel=1e-9)
    assert rep.summary["mass"] == pytest.approx(mass, rel=1e-9)
    ones = certify_cutoff(p, np.ones(p.n), 1 / 16, V, VertexSubset.of(p, mask=np.ones(p.n, bool)))
    flat = an.SpaceTimeField(u.grid, lambda t, k: np.full((np.size(t), p.n), 1.0 if k == 0 else 0.0),
                             np.ones(p.n, bool), None, "analytic", {"ancient": True})
    const = an.technical_lemma_check(p, flat, ones)
    assert const.rows[0].lhs == 0.0 and const.summary["C0"] == 1.0
    bad = certify_cutoff(p, cert.values, 0.2, cert.inner_set, cert.outer_set)
    with pytest.raises(PreconditionError, match="1/9"):
        an.technical_lemma_check(p, u, bad)


def test_polynomial_structure_quadratic_and_harmonic(lattice, family):
    p, x, V, ex = lattice
    rep = an.polynomial_structure_check(p, an.make_caloric_polynomial(p, x ** 2).field(), family)
    s = rep.summary
    assert s["verdict"] == "POLYNOMIAL(1)" and s["d_u"] >= 1 and rep.ok
    bounds = [row["bound"] for row in s["table"]]
    assert all(b < a for a, b in zip(bounds, bounds[1:]))
    assert [row["ratio"] for row in s["table_k2"]] == [1.0, 1 / 16, 1 / 256, 1 / 4096]
    h = an.polynomial_structure_check(p, an.make_caloric_polynomial(p, x).field(), family)
    assert h.summary["verdict"] == "POLYNOMIAL(0)" and h.ok


def test_polynomial_structure_sextic():
    p = build_path(401)
    x = an.lattice_position(p)
    V = VertexSubset.of(p, indices=range(195, 206))
    fam = an.exhaustion_family(p, V, depth=30)
    q = an.make_caloric_polynomial(p, x ** 6)
    rep = an.polynomial_structure_check(p, q.field(), fam)
    assert rep.summary["verdict"] == "POLYNOMIAL(3)"
    assert rep.summary["constructed_degree"] == 3
    assert rep.summary["derivative_norms"][4] <= 1e-10 and rep.ok


def test_growth_fit_refuses_non_monotone():
    prof = an.GrowthProfile((1.0, 2.0), (1, 2), (1, 2),
                            np.array([[[1.0, 2.0], [3.0, 4.0]], [[0.5, 2.0], [3.0, 4.0]]]))
    with pytest.raises(PreconditionError, match="monotone"):
        an.fit_polynomial_growth(prof)
    with pytest.raises(PreconditionError):
        an.fit_exponential_growth(prof)


def test_polynomial_growth_fit_dominates(lattice, family):
    p, x, V, ex = lattice
    u = an.make_caloric_polynomial(p, x ** 2).field()
    prof = an.fit_polynomial_growth(an.growth_profile(p, u, family))
    f = prof.fit
    for a, T in enumerate(prof.T_list):
        for b, i in enumerate(prof.i_list):
            for c, n in enumerate(prof.n_list):
                bound = f["C"][i] * max(T ** f["d_u"], n ** f["b_u"])
                assert prof.values[a, b, c] <= bound * (1 + 1e-12)
    # x^2 + 2t: the 2t term dominates for large T, so the norm grows like T^{3/2}
    assert f["d_u"] == pytest.approx(1.5, abs=0.15)


def test_dimension_bound():
    rep = an.dimension_bound_check(build_torus([8, 8]), d=2)
    s = rep.summary
    assert (s["dim_H"], s["dim_P"]) == (1, 1) and s["degenerate"] and rep.ok
    two = disjoint_union([build_torus([6, 6]), build_torus([5, 5])])
    rep = an.dimension_bound_check(two, d=1, windowed=False)
    assert rep.summary["dim_H"] == 2 and rep.rows[0].rhs == 4
    with pytest.raises(PreconditionError):
        an.dimension_bound_check(build_path(5, killing=0.1), d=1)


@pytest.mark.parametrize("d", [0, 1, 2, 3])
def test_windowed_basis_count(d):
    wb = an.windowed_basis(d)
    # oracle: seeds x^j have time degree floor(j/2); harmonic polynomials are span{1, x}
    # (only the constants when 2d = 0)
    assert wb["time_degrees"] == [len(symbolic_caloric([0] * j + [1])) - 1
                                  for j in range(2 * d + 1)]
    assert wb["dimension"] == 2 * d + 1
    assert wb["harmonic"] == min(2, 2 * d + 1)
    assert wb["dimension"] <= (d + 1) * wb["harmonic"]


def test_taylor_remainder_exponential(lattice):
    p, x, V, ex = lattice
    u = an.make_exponential_ancient(p, 1.0, window=np.abs(x) <= 200)
    rep = an.taylor_remainder_check(p, u, V, a=-1.0, k_max=25, exhaustion=ex)
    assert rep.ok, [r for r in rep.rows if r.verdict == "FAIL"]
    rem = rep.summary["remainders"]
    assert rem[25] < 1e-8
    mu = u.metadata["mu"]
    norm0 = math.sqrt(np.sum(u.at([0.0])[0][V.members] ** 2))
    with mpmath.workdps(40):
        for k in range(0, 12):
            tail = max(abs(mpmath.exp(mu * t) - sum((mu * t) ** i / mpmath.factorial(i)
                                                   for i in range(k + 1)))
                       for t in np.linspace(-1, 0, 201))
            assert rem[k] == pytest.approx(float(tail) * norm0, rel=1e-8, abs=1e-12)
    assert rep.summary["majorant_decreasing_from"] > 25


def test_taylor_constant_and_majorant_formula(lattice):
    p, x, V, ex = lattice
    const = an.make_exponential_ancient(p, 0.0)
    rep = an.taylor_remainder_check(p, const, V, a=-2.0, k_max=5, exhaustion=ex)
    assert max(rep.summary["remainders"]) == 0.0
    val, clamped = an.taylor_majorant(-1.0, 2, 1.0, 1)
    assert val == pytest.approx(5000.0 ** 3 / 4 * math.exp(1 + 1 + 15), rel=1e-12)
    assert not clamped
    big, clamped = an.taylor_majorant(-1.0, 30, 50.0, 1)
    assert clamped and math.isfinite(big)
    with pytest.raises(UsageError):
        an.taylor_remainder_check(p, const, V, a=-1.0, k_max=31, exhaustion=ex)


def test_serialization(lattice):
    p, x, V, ex = lattice
    rep = an.caccioppoli_check(p, an.make_caloric_polynomial(p, x ** 2).field(), ex)
    text = an.report_csv(rep)
    assert text.splitlines()[0] == "case,lhs,rhs,margin,verdict"
    assert len(text.splitlines()) == 3
    doc = json.loads(an.report_json(rep))
    assert doc["summary"]["K1"] == 400.0 and doc["counts"]["PASS"] == 2


def test_dimension_count_stable_on_long_path():
    # small path eigenvalues (~3e-5) must not be cut off as kernel when d grows
    rep = an.dimension_bound_check(build_path(601), d=3)
    assert (rep.summary["dim_H"], rep.summary["dim_P"]) == (1, 1) and rep.ok
