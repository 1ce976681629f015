"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Each test gathers named checks, records a summary line (shown at the end of
the pytest run) and then asserts.  Runtime budgets are part of the criteria.
"""

import math
import subprocess
import sys
import time

import mpmath
import numpy as np
import pytest
from scipy.linalg import eigh, expm

from caloric_lab import ancient_structure as an
from caloric_lab import cutoff_toolkit as ct
from caloric_lab import dirichlet_core as dc
from caloric_lab import gaussian_bounds as gb
from caloric_lab import mollifier_lab as ml
from caloric_lab import spectral_semigroup as ss
from caloric_lab import weak_solutions as ws
from caloric_lab.reports import FAIL, PASS, SKIP, XFAIL
from caloric_lab.space_builders import (VertexSubset, build_grid2d, build_path, build_torus,
                                        refine, sample)

from conftest import fleet


class Criterion:
    def __init__(self, log, number, title, budget_s):
        self.log, self.number, self.title, self.budget = log, number, title, budget_s
        self.checks = []
        self.start = time.perf_counter()

    def check(self, name, ok, info=""):
        self.checks.append((name, bool(ok), info))

    def finish(self):
        elapsed = time.perf_counter() - self.start
        self.check(f"runtime < {self.budget:g} s", elapsed < self.budget, f"{elapsed:.1f} s")
        failed = [c for c in self.checks if not c[1]]
        verdict = "PASS" if not failed else "FAIL"
        detail = "; ".join(f"{n}: {i}" for n, ok, i in failed) if failed else \
            f"{len(self.checks)} checks, {elapsed:.1f} s"
        line = f"criterion {self.number:2d} [{self.title}]: {verdict} ({detail})"
        self.log[self.number] = line
        print(line)
        assert not failed, line


def sub(space, *idx):
    return VertexSubset.of(space, indices=list(idx))


def generator_eigenvalues(space):
    """Independent route: dense generalized eigenproblem K v = lambda M v."""
    return eigh(space.stiffness().toarray(), np.diag(space.measure), eigvals_only=True)


def dense_heat(space, t):
    P = space.stiffness().toarray() / space.measure[:, None]
    return expm(-t * P)


# --- 1 ---------------------------------------------------------------------------------------

def test_criterion_01_spectral_bound(acceptance_log):
    c = Criterion(acceptance_log, 1, "spectral calculus bound", 10)
    for name, s in fleet().items():
        lam = np.clip(generator_eigenvalues(s), 0, None)
        d = ss.decompose(s)
        for k in range(6):
            for j in range(20):
                t = 4.0 * 2.0 ** -j
                direct = float(np.max(lam ** k * np.exp(-lam * t)))
                bound = 1.0 if k == 0 else (k / (math.e * t)) ** k
                lib = ss.heat_derivative_norm(d, k, t)
                c.check(f"{name} k={k} t={t:g} bound", direct <= bound + 1e-12,
                        f"{direct:.6g} > {bound:.6g}")
                c.check(f"{name} k={k} t={t:g} library", lib <= bound + 1e-12 and
                        abs(lib - direct) <= 1e-9 * max(1.0, direct), f"{lib} vs {direct}")
                c.check(f"{name} k={k} t={t:g} formula",
                        ss.spectral_bound(k, t) == pytest.approx(bound, rel=1e-15), "")
    c.finish()


# --- 2 ---------------------------------------------------------------------------------------

def test_criterion_02_energy_measure(acceptance_log):
    c = Criterion(acceptance_log, 2, "energy-measure compatibility", 30)
    rng = np.random.default_rng(2)
    for name, s in fleet().items():
        worst = 0.0
        for _ in range(200):
            u, v = rng.normal(size=(2, s.n))
            e = dc.energy(s, u, v)
            total = np.sum(dc.gamma_mass(s, u, v)) + np.sum(s.killing * u * v * s.measure)
            scale = abs(e) + math.sqrt(dc.energy(s, u, u) * dc.energy(s, v, v))
            worst = max(worst, abs(total - e) / scale)
        c.check(f"{name} compatibility", worst <= 1e-12, f"relative error {worst:.3g}")
        u, v = rng.normal(size=(2, s.n))
        k = np.full(s.n, -1.25)
        const = [dc.leibniz_defect(s, k, u, v), dc.leibniz_defect(s, u, k, v),
                 dc.leibniz_defect(s, u, v, k), dc.chain_defect(s, np.sin, np.cos, k, u),
                 dc.chain_defect(s, np.sin, np.cos, u, k)]
        c.check(f"{name} constant defects", all(x == 0.0 for x in const), str(const))
    fam = refine("path", 5, n0=9)
    h = np.array(fam.mesh_widths)
    leib, chain = [], []
    for s in fam.spaces:
        u = sample(s, lambda x: np.sin(2 * np.pi * x) + x)
        v = sample(s, lambda x: np.cos(3 * x))
        w = sample(s, lambda x: x ** 2)
        leib.append(dc.leibniz_defect(s, u, v, w))
        chain.append(dc.chain_defect(s, np.sin, np.cos, u, v))
    for label, vals in (("leibniz", leib), ("chain", chain)):
        order = float(np.polyfit(np.log(h), np.log(vals), 1)[0])
        c.check(f"{label} decay order", order >= 0.75, f"order {order:.3f}")
    c.finish()


# --- 3 ---------------------------------------------------------------------------------------

def test_criterion_03_cutoff_certification(acceptance_log):
    c = Criterion(acceptance_log, 3, "cut-off certification", 60)
    rng = np.random.default_rng(3)
    for name, s in fleet().items():
        eta = ct.ramp_profile(s, sub(s, s.n // 2), 2)
        for c1 in (0.05, 0.2):
            cert = ct.certify_cutoff(s, eta, c1)
            tight = ct.tightness_check(s, cert, n_samples=10_000, rng=rng, gap_tol=1e-6)
            gap = tight.summary["eigen"] - tight.summary["polished_max"]
            c.check(f"{name} c1={c1} tightness", tight.ok, f"gap {gap:.3g}")
            c.check(f"{name} c1={c1} sample below eigen",
                    tight.summary["sample_max"] <= cert.c2 * (1 + 1e-12) + 1e-12, "")
            worst = min(ct.gradient_inequality_check(s, cert, rng.normal(size=s.n))
                        .min_margin() for _ in range(100))
            c.check(f"{name} c1={c1} gradient margins", worst >= -1e-10, f"min {worst:.3g}")
        a = ct.certify_cutoff(s, eta, 0.05)
        prod = ct.combine(s, a, a, "product", rng=rng)
        c.check(f"{name} product constants", (prod.c1, prod.c2) == (16 * a.c1, 8 * a.c2), "")
        c.check(f"{name} product lemma", ct.lemma_check(s, prod).ok, "")
        dist = s.hop_distances(np.eye(s.n, dtype=bool)[s.n // 2])
        far = int(np.argmax(np.where(np.isfinite(dist), dist, -1)))
        if dist[far] >= 5:
            b = ct.certify_cutoff(s, ct.ramp_profile(s, sub(s, far), 2), 0.05)
            total = ct.combine(s, a, b, "sum", rng=rng)
            c.check(f"{name} sum constants",
                    (total.c1, total.c2) == (2 * a.c1, 4 * max(a.c2, b.c2)), "")
            c.check(f"{name} sum lemma", ct.lemma_check(s, total).ok, "")
    c.finish()


# --- 4 ---------------------------------------------------------------------------------------

def test_criterion_04_davies_gronwall(acceptance_log):
    c = Criterion(acceptance_log, 4, "Davies-Gronwall", 20)
    rng = np.random.default_rng(4)
    ts = np.linspace(0, 2, 20)
    pairs = ((1, 0.05), (2, 0.05), (2, 0.1), (3, 0.2), (4, 0.1))
    plain_failures = 0
    for name, s in fleet().items():
        d = ss.decompose(s)
        centre = sub(s, s.n // 2)
        for width, c1 in pairs:
            phi = ct.ramp_profile(s, centre, width)
            lam = 1 / math.sqrt(c1)
            cert = gb.certify_perturbation(s, phi, lam, c1)
            f = rng.normal(size=s.n)
            rep = gb.davies_gronwall_check(d, cert, lam, f, ts, slack=1e-9)
            c.check(f"{name} ({width},{c1}) report", rep.ok,
                    str([r.case for r in rep.rows if r.verdict == FAIL][:3]))
            f2 = float(np.sum(s.measure * f ** 2))
            for t in ts:
                H = dense_heat(s, t)
                u = np.exp(-lam * phi) * (H @ (np.exp(lam * phi) * f))
                lhs = float(np.sum(s.measure * u ** 2))
                # compared in logs: the rhs overflows for steep ramps on fine grids
                log_rhs = math.log(f2) + 2 * lam ** 2 * cert.c2 * t
                c.check(f"{name} ({width},{c1}) t={t:.3g} oracle",
                        math.log(lhs) <= log_rhs + 1e-9, f"{math.log(lhs)} > {log_rhs}")
            plain = ct.certify_cutoff(s, phi, c1)
            plain_failures += not gb.davies_gronwall_check(d, plain, lam, f, ts).ok
    print(f"info: plain (unperturbed) certificates failed on {plain_failures} of "
          f"{5 * len(fleet())} pairs")
    c.finish()


# --- 5 ---------------------------------------------------------------------------------------

def test_criterion_05_weak_gaussian(acceptance_log):
    c = Criterion(acceptance_log, 5, "weak Gaussian assumption", 60)
    ts = 2.0 ** -np.arange(0, 11)
    p = build_path(65)
    d = ss.decompose(p)
    V1, V2 = sub(p, 28), sub(p, 36)
    rep = gb.assumption_check(d, V1, V2, [0.5, 1, 2, 4, 10], 0, ts)
    verdict = {r.detail["a"]: r for r in rep.rows}
    # oracle: with unit weights G(0, t) is the (36, 28) kernel entry, which is
    # exp(-2t) I_8(2t) up to boundary images at distance 65 (relative size < 1e-50)
    oracle = np.array([float(mpmath.exp(-2 * t) * mpmath.besseli(8, 2 * t)) for t in ts])
    lib = np.array([gb.masked_heat_norm(d, V1, V2, 0, t) for t in ts])
    c.check("kernel matches expm", np.allclose(lib, oracle, rtol=1e-8, atol=1e-300),
            f"max rel {np.max(np.abs(lib / oracle - 1)):.2g}")
    for a in (0.5, 1, 2, 4):
        scaled = ts ** -a * oracle
        c.check(f"a={a} decreases", np.all(np.diff(scaled) < 0), "")
        c.check(f"a={a} below 1e-3", scaled[-1] <= 1e-3 * scaled[0],
                f"{scaled[-1] / scaled[0]:.3g}")
        c.check(f"a={a} report PASS", verdict[a].verdict == PASS, verdict[a].verdict)
    c.check("a=10 XFAIL", verdict[10.0].verdict == XFAIL, verdict[10.0].verdict)
    expo = rep.summary["fitted_exponent"][0]
    c.check("fitted exponent near hop distance", abs(expo - 8) <= 0.3, f"{expo:.3f}")
    q = build_path(129, conductance=2.0, measure=0.5)
    fine = gb.assumption_check(ss.decompose(q), sub(q, 56), sub(q, 72), [0.5, 1, 2, 4, 10], 0, ts)
    lo, hi = rep.summary["validity_ceiling"][0], fine.summary["validity_ceiling"][0]
    c.check("ceiling increases under refinement", hi > lo, f"{lo} -> {hi}")
    c.finish()


# --- 6 ---------------------------------------------------------------------------------------

def test_criterion_06_derivative_bounds(acceptance_log):
    c = Criterion(acceptance_log, 6, "derivative-bound cross-validation", 30)
    for t in (0.3, 1.0, 2.5):
        for n in range(4):
            c.check(f"prefactor n={n}", gb.derivative_prefactor(n, t) == pytest.approx(
                math.factorial(n) * 2 ** n / t ** n, rel=1e-14), "")
    cases = {"P3": (build_path(3), (0,), (2,)), "path33": (build_path(33), (12,), (20,))}
    for name, (s, i1, i2) in cases.items():
        d = ss.decompose(s)
        V1, V2 = sub(s, *i1), sub(s, *i2)
        f, g = V1.members.astype(float), V2.members.astype(float)
        worst = 0.0
        for t in (0.25, 0.5, 1.0, 2.0, 4.0):
            for n in range(4):
                cau = gb.cauchy_derivative(d, f, g, n, t, radius=t / 2, nodes=256)
                spec = gb.spectral_derivative(d, f, g, n, t)
                worst = max(worst, abs(cau - spec))
        c.check(f"{name} Cauchy vs spectral", worst <= 1e-8, f"max diff {worst:.3g}")
        width = gb.hop_distance(s, V1, V2)
        phi = ct.ramp_profile(s, V1, width)
        gmax = float((dc.gamma_mass(s, phi, phi) / s.measure).max())
        rep = gb.derivative_bound_check(d, V1, V2, 3, (1.5 * gmax, 0.0),
                                        [0.25, 0.5, 1, 2, 4, 8], phi=phi)
        bound_rows = [r for r in rep.rows if r.case.startswith("bound")]
        c.check(f"{name} bound dominates in window",
                all(r.verdict in (PASS, SKIP) for r in bound_rows)
                and any(r.verdict == PASS for r in bound_rows),
                str([r.case for r in bound_rows if r.verdict == FAIL][:3]))
    c.finish()


# --- 7 ---------------------------------------------------------------------------------------

def test_criterion_07_local_derivative_bounds(acceptance_log):
    c = Criterion(acceptance_log, 7, "local derivative bounds", 120)
    profiles = [ws.BoundaryProfile((1.0, 0.5, -0.3)), ws.BoundaryProfile((0.0, 0.0, 1.0)),
                ws.BoundaryProfile((0.0,), ((1.0, 1.0, 0.0),)),
                ws.BoundaryProfile((0.2,), ((0.5, 2.0, 0.3),)),
                ws.BoundaryProfile((1.0, -1.0), ((0.3, 3.0, 1.0),))]
    path = build_path(21)
    grid = build_grid2d(9, 9, mesh_h=1 / 8)
    centre = np.zeros(grid.n, bool)
    centre[40] = True
    domains = {"path21": (path, VertexSubset.of(path, indices=range(5, 16)), 10),
               "grid9": (grid, VertexSubset.of(grid, mask=grid.hop_distances(centre) <= 3), 40)}
    g = ws.TimeGrid(0, 1, 257)
    for name, (s, U, v0) in domains.items():
        f = ws.zero_field(s, g)
        basis = ws.interior_basis(s, U.members, g)
        for j, prof in enumerate(profiles):
            u = ws.generate_local_solution(s, U, prof, g)
            for k in (1, 2, 3):
                val = ws.verify_derivative_regularity(s, u, f, k, basis).residual.value
                c.check(f"{name} profile {j} k={k}", val < 1e-6, f"{val:.3g}")
            bumped = ws.residual_norm(s, ws.perturb(u, v0, 1e-3), f, basis).value
            c.check(f"{name} profile {j} sensitivity", bumped >= 1e-5, f"{bumped:.3g}")
    c.finish()


# --- 8 ---------------------------------------------------------------------------------------

def test_criterion_08_mollifier(acceptance_log):
    c = Criterion(acceptance_log, 8, "mollifier suite", 180)
    taus = 2.0 ** -np.arange(3, 10)
    p = build_path(33)
    d = ss.decompose(p)
    g = ws.TimeGrid(0, 1, 65)
    x = np.linspace(0, 1, p.n)
    w = ws.SpaceTimeField(g, lambda t, k: np.outer(np.cos(np.asarray(t) + np.pi * k / 2),
                                                   np.sin(np.pi * x)), np.ones(p.n, bool))
    tab = ml.convergence_sweep(d, w, ml.BUMP, taus)
    c.check("A_tau w - w slope", abs(tab.summary["slope"] - 1) <= 0.2,
            f"{tab.summary['slope']:.3f}")
    q = build_path(21)
    dq = ss.decompose(q)
    U = VertexSubset.of(q, indices=range(3, 18))
    gq = ws.TimeGrid(0, 1, 257)
    u = ws.generate_local_solution(q, U, ws.BoundaryProfile((0.0,), ((1.0, 1.0, 0.0),)), gq,
                                   u0_interior=np.zeros(q.n))
    cfg = ml.nested_config(q, U.members, (0, 1), sub(q, 10))
    l2 = ml.cauchy_l2_sweep(dq, cfg, u, tau_list=taus)
    en = ml.cauchy_energy_sweep(dq, cfg, u, taus, l2)
    for k in range(3):
        a = l2.summary[f"k={k}"]
        c.check(f"L2 bounded k={k}", a["max"] <= 2 * a["median"], f"ratio {a['ratio']:.3f}")
        b = en.summary[f"k={k}"]
        c.check(f"energy*sqrt(tau) bounded k={k}", b["max"] <= 2 * b["median"],
                f"ratio {b['ratio']:.3f}")
    lim = ml.mollifier_limit_check(dq, cfg, u, tau_list=taus)
    for k, order in lim.summary["orders"].items():
        c.check(f"limit order k={k}", order >= 0.8, f"{order:.3f}")
    c.finish()


# --- 9 ---------------------------------------------------------------------------------------

def test_criterion_09_caccioppoli(acceptance_log):
    c = Criterion(acceptance_log, 9, "Caccioppoli constants", 120)
    c.check("K1, K2 at C=r=1", an.caccioppoli_constants(1.0, 1.0) == (400.0, 4800.0),
            str(an.caccioppoli_constants(1.0, 1.0)))
    for C, r in ((1.0, 1.0), (0.5, 2.0), (2.0, 0.5)):
        K1, K2 = an.caccioppoli_constants(C, r)
        c.check(f"constants C={C} r={r}", (K1, K2) == pytest.approx(
            (200 * (C + 1 / r), 1200 * (C + 1 / r) ** 2), rel=1e-15), "")
        for k in (1, 2):
            c.check(f"coefficient k={k}", an.iterated_coefficient(C, r, k) == pytest.approx(
                (1200 * (C + 1 / r) ** 2) ** k, rel=1e-15), "")
    p = build_path(2001)
    x = an.lattice_position(p)
    V = VertexSubset.of(p, mask=np.abs(x) <= 5)
    ex = ct.build_exhaustion(p, V, 1 / 16, 1.0, max_sets=12)
    c.check("exhaustion at C1 = 1/16", ex.c1 == 1 / 16, str(ex.c1))
    fields = {"x^2+2t": an.make_caloric_polynomial(p, x ** 2).field(),
              "x^4 seeded": an.make_caloric_polynomial(p, x ** 4).field(),
              "exp(x+mu t)": an.make_exponential_ancient(p, 1.0, window=np.abs(x) <= 250)}
    rep = an.caccioppoli_sweep(p, fields, ex, i_list=(1, 2), r_list=(0.5, 1.0),
                               J_list=((-1.0, 0.0), (-2.0, -0.5)), k_list=(1, 2))
    counts = rep.counts()
    c.check("sweep has no FAIL", counts[FAIL] == 0, str(counts))
    c.check("sweep margins >= -1e-9", rep.min_margin() >= -1e-9, f"{rep.min_margin():.3g}")
    for name in fields:
        c.check(f"{name} covered", any(r.case.startswith(name) and r.verdict == PASS
                                       for r in rep.rows), "")
    base = an.caccioppoli_check(p, fields["x^2+2t"], ex)
    c.check("literal K1, K2", (base.summary["K1"], base.summary["K2"]) == (400.0, 4800.0), "")
    # oracle: d_t (x^2 + 2t) = 2, so the lhs integral is 4 |W_1| |J|
    c.check("closed-form lhs", base.summary["integrals"]["dtu_sq"] == pytest.approx(
        4 * int(ex.sets[0].members.sum()), rel=1e-12), "")
    c.finish()


# --- 10 --------------------------------------------------------------------------------------

def test_criterion_10_structure(acceptance_log):
    c = Criterion(acceptance_log, 10, "ancient structure", 120)
    p = build_path(601)
    x = an.lattice_position(p)
    V = VertexSubset.of(p, mask=np.abs(x) <= 5)
    fam = an.exhaustion_family(p, V, depth=16)
    quad = an.polynomial_structure_check(p, an.make_caloric_polynomial(p, x ** 2).field(), fam)
    s = quad.summary
    c.check("x^2+2t detects N=1", s["verdict"] == "POLYNOMIAL(1)", s["verdict"])
    c.check("x^2+2t d_t^2 u vanishes", s["derivative_norms"][2] <= 1e-10,
            f"{s['derivative_norms'][2]:.3g}")
    bounds = [row["bound"] for row in s["table"]]
    c.check("decay table strictly decreasing", all(b < a for a, b in zip(bounds, bounds[1:])),
            str(bounds))
    ratios = [row["ratio"] for row in s["table_k2"]]
    c.check("(5000/n^2)^k ratios", ratios == [(1 / n ** 2) ** 2 for n in (1, 2, 4, 8)],
            str(ratios))
    q = build_path(401)
    xq = an.lattice_position(q)
    Vq = VertexSubset.of(q, mask=np.abs(xq) <= 5)
    six = an.polynomial_structure_check(q, an.make_caloric_polynomial(q, xq ** 6).field(),
                                        an.exhaustion_family(q, Vq, depth=30))
    s6 = six.summary
    c.check("x^6 seeded detects N=3", s6["verdict"] == "POLYNOMIAL(3)", s6["verdict"])
    c.check("x^6 seeded d_t^4 u vanishes", s6["derivative_norms"][4] <= 1e-10,
            f"{s6['derivative_norms'][4]:.3g}")
    ex = ct.build_exhaustion(p, V, 1 / 16, 1.0, max_sets=12)
    u = an.make_exponential_ancient(p, 1.0, window=np.abs(x) <= 200)
    tay = an.taylor_remainder_check(p, u, V, a=-1.0, k_max=25, exhaustion=ex)
    rem = tay.summary["remainders"]
    c.check("Taylor remainder < 1e-8 by k=25", rem[25] < 1e-8, f"{rem[25]:.3g}")
    maj = [r for r in tay.rows if r.case.startswith("majorant")]
    c.check("majorant dominates last 5 k", len(maj) == 5 and all(r.verdict == PASS for r in maj),
            str([(r.case, r.verdict) for r in maj]))
    torus = build_torus([8, 8])
    for d in range(4):
        rep = an.dimension_bound_check(torus, d)
        sd = rep.summary
        c.check(f"torus d={d} dim P <= (d+1) dim H",
                sd["dim_P"] <= (d + 1) * sd["dim_H"] and rep.ok, str(sd))
        wb = an.windowed_basis(d)
        c.check(f"windowed count d={d}", wb["dimension"] == 2 * d + 1 <= 2 * (d + 1),
                str(wb["dimension"]))
    c.finish()


# --- 11 --------------------------------------------------------------------------------------

def test_criterion_11_determinism(acceptance_log, tmp_path):
    c = Criterion(acceptance_log, 11, "determinism", 12 * 60)
    outputs = []
    for name in ("first", "second"):
        out = tmp_path / name
        proc = subprocess.run([sys.executable, "-m", "caloric_lab.cli_report", "verify",
                               "--suite", "all", "--seed", "7", "--out", str(out), "--csv"],
                              capture_output=True, text=True, timeout=12 * 60)
        c.check(f"{name} run exit code", proc.returncode in (0, 1), proc.stderr[-500:])
        outputs.append((out / "verify.csv").read_bytes())
    c.check("byte-identical CSV", outputs[0] == outputs[1], "outputs differ")
    c.check("CSV nonempty", outputs[0].count(b"\n") > 100, "")
    c.finish()
