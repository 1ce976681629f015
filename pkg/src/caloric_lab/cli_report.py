"""Command-line front end: build spaces, run verification suites, sweep parameters.

Every suite turns library checks into rows of one flat table.  Rows carry
the suite id, a case id that is unique within the suite, the two sides of
the checked relation, the margin and a verdict.  Output is deterministic:
rows are sorted before writing, floats are printed with 12 significant
digits and random vectors come from a Philox stream keyed by the seed and a
hash of the case id, so the execution order never matters.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import click
import numpy as np

from . import __version__, reports
from . import ancient_structure as an
from . import cutoff_toolkit as ct
from . import dirichlet_core as dc
from . import gaussian_bounds as gb
from . import mollifier_lab as ml
from . import spectral_semigroup as ss
from . import weak_solutions as ws
from .errors import LabError, PreconditionError, ResourceError, UsageError, ValidationError
from .space_builders import (DiscreteDirichletSpace, VertexSubset, build_cycle, build_gasket,
                             build_grid2d, build_path, build_product, space_from_json,
                             space_to_json)

SUITES = ("core", "semigroup", "cutoff", "weak", "mollifier", "gaussian", "ancient")
AXES = {"mollifier": ("tau",), "gaussian": ("t", "refinement"), "ancient": ("n_exhaustion",)}
EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_RESOURCE = 0, 1, 2, 3
CSV_HEADER = ("suite", "case", "lhs", "rhs", "margin", "verdict", "runtime_ms")

DEFAULT_TOLS = {
    "compat": 1e-12,        # relative, sum of Gamma m plus killing against E
    "spectral": 1e-12,      # absolute slack on the (k/et)^k bound
    "semigroup": 1e-10,     # relative, H_s H_t = H_{s+t} and contraction
    "cutoff_gap": 1e-6,     # sampled sup against the eigen-certified c2
    "cutoff_rel": 1e-10,    # relative slack of certificate inequalities
    "gronwall": 1e-9,
    "residual": 1e-6,
    "sensitivity": 1e-5,
    "cauchy_match": 1e-8,
    "slope": 0.2,
    "bounded_ratio": 2.0,
}

DEFAULT_SPACES = {
    "core": {"kind": "path", "n": 33},
    "semigroup": {"kind": "path", "n": 33},
    "cutoff": {"kind": "path", "n": 33},
    "weak": {"kind": "path", "n": 21},
    "mollifier": {"kind": "path", "n": 21},
    "gaussian": {"kind": "path", "n": 65},
    "ancient": {"kind": "path", "n": 601},
}

TAKEDA_TIMES = (0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0)
DERIVATIVE_TIMES = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0)


# --- configuration ---------------------------------------------------------------------------

def _float_tuple(values) -> tuple:
    return tuple(float(v) for v in values)


DEFAULT_TAU = _float_tuple(2.0 ** -np.arange(3, 10))
DEFAULT_T = _float_tuple(2.0 ** -np.arange(0, 11))


@dataclass
class SuiteConfig:
    """Run configuration.  ``tau`` and ``t`` left as None follow the space's time scale."""

    suite: str = "all"
    space: dict | None = None
    tolerances: dict = field(default_factory=lambda: dict(DEFAULT_TOLS))
    tau: tuple | None = None
    t: tuple | None = None
    k: tuple = (1, 2, 3)
    a: tuple = (0.5, 1.0, 2.0, 4.0, 10.0)
    seed: int = 0

    def validate(self) -> "SuiteConfig":
        if self.suite not in SUITES + ("all",):
            raise UsageError(f"unknown suite {self.suite!r}")
        for name, value in self.tolerances.items():
            if name not in DEFAULT_TOLS:
                raise UsageError(f"unknown tolerance {name!r}; known: {', '.join(DEFAULT_TOLS)}")
            if not (math.isfinite(value) and value > 0):
                raise UsageError(f"tolerance {name} must be positive, got {value}")
        for name in ("tau", "t", "k", "a"):
            if getattr(self, name) is not None and len(getattr(self, name)) == 0:
                raise UsageError(f"{name} grid is empty")
        if any(not (v > 0 and math.isfinite(v)) for v in (self.tau or ()) + (self.t or ())):
            raise UsageError("tau and t grids must be positive and finite")
        if any(int(k) != k or k < 0 for k in self.k):
            raise UsageError("k grid must hold nonnegative integers")
        if any(not (a >= 0 and math.isfinite(a)) for a in self.a):
            raise UsageError("a grid must be nonnegative")
        if not 0 <= self.seed < 2 ** 64:
            raise UsageError("seed must be an unsigned 64-bit integer")
        return self

    def echo(self) -> dict:
        return {"suite": self.suite, "space": self.space, "tolerances": dict(self.tolerances),
                "tau": "auto" if self.tau is None else list(self.tau),
                "t": "auto" if self.t is None else list(self.t),
                "k": list(self.k), "a": list(self.a), "seed": self.seed}

    def taus(self, geo: "Geometry | None" = None) -> np.ndarray:
        if self.tau is not None:
            return np.asarray(self.tau)
        return np.asarray(DEFAULT_TAU) * (geo.time_scale if geo else 1.0)

    def times(self, geo: "Geometry | None" = None) -> np.ndarray:
        if self.t is not None:
            return np.asarray(self.t)
        return np.asarray(DEFAULT_T) * (geo.time_scale if geo else 1.0)


def case_rng(seed: int, case_id: str) -> np.random.Generator:
    """Counter-based stream for one case: Philox keyed by (seed, blake2b(case id))."""
    digest = hashlib.blake2b(case_id.encode("utf-8"), digest_size=8).digest()
    key = (int(seed) << 64) | int.from_bytes(digest, "little")
    return np.random.Generator(np.random.Philox(key=key))


def _positive_int(text, what: str) -> int:
    try:
        value = int(str(text).strip())
    except ValueError:
        raise UsageError(f"{what} must be an integer, got {text!r}") from None
    if value < 1:
        raise UsageError(f"{what} must be positive, got {value}")
    return value


def parse_product(text: str) -> dict:
    """``KIND:N[@W],...`` with KIND in {path, cycle}, e.g. ``path:5,path:4@2``."""
    factors, weights = [], []
    for item in str(text).split(","):
        item = item.strip()
        body, _, weight = item.partition("@")
        kind, _, size = body.partition(":")
        if kind not in ("path", "cycle") or not size:
            raise UsageError(f"bad product factor {item!r}; expected path:N or cycle:N[@W]")
        factors.append([kind, _positive_int(size, "factor size")])
        try:
            weights.append(float(weight) if weight else 1.0)
        except ValueError:
            raise UsageError(f"bad factor weight in {item!r}") from None
    return {"kind": "product", "factors": factors, "weights": weights}


def space_spec(path=None, grid=None, gasket=None, product=None, space_file=None) -> dict | None:
    given = [x is not None for x in (path, grid, gasket, product, space_file)]
    if sum(given) > 1:
        raise UsageError("give at most one of --space, --path, --grid, --gasket, --product")
    if path is not None:
        return {"kind": "path", "n": _positive_int(path, "--path")}
    if grid is not None:
        parts = str(grid).split(",")
        if len(parts) != 2:
            raise UsageError(f"--grid expects NX,NY, got {grid!r}")
        return {"kind": "grid", "nx": _positive_int(parts[0], "NX"),
                "ny": _positive_int(parts[1], "NY")}
    if gasket is not None:
        try:
            level = int(str(gasket))
        except ValueError:
            raise UsageError(f"--gasket expects a level, got {gasket!r}") from None
        return {"kind": "gasket", "level": level}
    if product is not None:
        return parse_product(product)
    if space_file is not None:
        return {"kind": "file", "path": str(space_file)}
    return None


def build_space(spec: dict) -> DiscreteDirichletSpace:
    kind = spec.get("kind")
    try:
        if kind == "path":
            return build_path(int(spec["n"]))
        if kind == "grid":
            nx, ny = int(spec["nx"]), int(spec["ny"])
            return build_grid2d(nx, ny, np.eye(2), 1.0 / (max(nx, ny) - 1))
        if kind == "gasket":
            return build_gasket(int(spec["level"]))
        if kind == "product":
            make = {"path": build_path, "cycle": build_cycle}
            parts = [make[k](int(n)) for k, n in spec["factors"]]
            return build_product(parts, [float(w) for w in spec["weights"]])
        if kind == "file":
            return space_from_json(Path(spec["path"]).read_text(encoding="utf-8"))
    except (KeyError, TypeError, ValueError, OSError, ZeroDivisionError) as exc:
        if isinstance(exc, LabError):
            raise
        raise UsageError(f"cannot build space from {spec}: {exc}") from None
    raise UsageError(f"unknown space kind {kind!r}")


# --- case execution --------------------------------------------------------------------------

@dataclass
class CaseRow:
    suite: str
    case: str
    lhs: float
    rhs: float
    margin: float
    verdict: str
    runtime_ms: float = 0.0
    detail: dict = field(default_factory=dict)


class Runner:
    """Collects rows for one suite; each group gets its own random stream."""

    def __init__(self, suite: str, seed: int):
        self.suite, self.seed = suite, seed
        self.rows: list[CaseRow] = []

    def run(self, group: str, fn: Callable[[np.random.Generator], object]) -> None:
        rng = case_rng(self.seed, f"{self.suite}/{group}")
        start = time.perf_counter()
        try:
            out = fn(rng)
            rows = out.rows if isinstance(out, reports.Report) else list(out)
        except (UsageError, ResourceError):
            raise
        except (PreconditionError, ValidationError) as exc:
            rows = [reports.Row("precondition", math.nan, math.nan, math.nan, reports.SKIP,
                                {"reason": str(exc)})]
        except Exception as exc:  # numeric trouble inside a case is a failed case
            rows = [reports.Row("error", math.nan, math.nan, math.nan, reports.FAIL,
                                {"error": f"{type(exc).__name__}: {exc}"})]
        ms = 1000.0 * (time.perf_counter() - start)
        for i, r in enumerate(rows):
            self.rows.append(CaseRow(self.suite, f"{group}:{i:03d}:{r.case}", r.lhs, r.rhs,
                                     r.margin, r.verdict, ms, dict(r.detail)))


def _onehot(space: DiscreteDirichletSpace, i: int) -> np.ndarray:
    m = np.zeros(space.n, bool)
    m[i] = True
    return m


def _finite_argmax(d: np.ndarray) -> int:
    return int(np.argmax(np.where(np.isfinite(d), d, -1)))


def centre_vertex(space: DiscreteDirichletSpace) -> int:
    """Vertex of least eccentricity (lowest index on ties), by chunked breadth-first search."""
    from scipy.sparse.csgraph import shortest_path

    adj = space.conductance_matrix().tocsr()
    adj.data[:] = 1.0
    ecc = np.empty(space.n)
    for start in range(0, space.n, 256):
        idx = np.arange(start, min(start + 256, space.n))
        d = shortest_path(adj, unweighted=True, indices=idx)
        ecc[idx] = np.where(np.isfinite(d), d, -1).max(axis=1)
    return int(np.argmin(ecc))


class Geometry:
    """Centre, hop distances and balls of one space, computed once."""

    def __init__(self, space: DiscreteDirichletSpace):
        self.space = space
        self.c = centre_vertex(space)
        self.dist = space.hop_distances(_onehot(space, self.c))
        finite = self.dist[np.isfinite(self.dist)]
        self.ecc = int(finite.max())
        self._decomp = None
        # default time grids are tuned for jump rate 2 (unit path); faster
        # spaces need proportionally smaller times to reach the same regime
        rate = float((space.stiffness().diagonal() / space.measure).max())
        self.time_scale = min(1.0, 8.0 / rate) if rate > 0 else 1.0

    @property
    def decomp(self):
        if self._decomp is None:
            self._decomp = ss.decompose(self.space)
        return self._decomp

    def ball(self, radius: int) -> VertexSubset:
        return VertexSubset.of(self.space, mask=self.dist <= radius)

    def local_ball(self, cap: int = 7) -> VertexSubset:
        radius = min(cap, self.ecc - 1)
        if radius < 2:
            raise PreconditionError("space too small for a local domain with interior")
        return self.ball(radius)

    def far_singleton(self, hops: int) -> VertexSubset:
        h = min(hops, self.ecc)
        return VertexSubset.of(self.space, indices=[int(np.flatnonzero(self.dist == h)[0])])


# --- suites ----------------------------------------------------------------------------------

def suite_core(geo: Geometry, cfg: SuiteConfig, run: Runner) -> None:
    s, tol = geo.space, cfg.tolerances

    def compat(rng):
        rows = []
        for i in range(50):
            u, v = rng.normal(size=(2, s.n))
            e = dc.energy(s, u, v)
            total = np.sum(dc.gamma_mass(s, u, v)) + np.sum(s.killing * u * v * s.measure)
            scale = abs(e) + math.sqrt(dc.energy(s, u, u) * dc.energy(s, v, v))
            rows.append(reports.close(f"pair{i:02d}", total, e, abs_tol=tol["compat"] * scale))
        return rows

    def symmetry(rng):
        rows = []
        for i in range(10):
            u, v = rng.normal(size=(2, s.n))
            e = dc.energy(s, u, v)
            rows.append(reports.close(f"pair{i:02d}", dc.energy(s, v, u), e,
                                      abs_tol=tol["compat"] * (abs(e) + 1.0)))
        return rows

    def constants(rng):
        u, v = rng.normal(size=(2, s.n))
        c = np.full(s.n, 2.5)
        return [reports.leq("leibniz,c-u-v", dc.leibniz_defect(s, c, u, v), 0.0),
                reports.leq("leibniz,u-c-v", dc.leibniz_defect(s, u, c, v), 0.0),
                reports.leq("leibniz,u-v-c", dc.leibniz_defect(s, u, v, c), 0.0),
                reports.leq("chain,const-u", dc.chain_defect(s, np.sin, np.cos, c, u), 0.0),
                reports.leq("chain,u-const", dc.chain_defect(s, np.sin, np.cos, u, c), 0.0)]

    def markov(rng):
        rows = []
        for i in range(20):
            f = 1.5 * np.abs(rng.normal(size=s.n))
            g = np.minimum(f, 1.0)
            ef = dc.energy(s, f, f)
            rows.append(reports.leq(f"sample{i:02d}", dc.energy(s, g, g), ef, rel_tol=1e-12))
        return rows

    def cauchy_schwarz(rng):
        rep = reports.Report("cauchy_schwarz")
        for C in (0.1, 1.0, 10.0):
            f, g, u, v = rng.normal(size=(4, s.n))
            rep.extend(dc.cauchy_schwarz_check(s, f, g, u, v, C), prefix=f"C={C:g},")
        return rep

    run.run("compatibility", compat)
    run.run("symmetry", symmetry)
    run.run("constant_defects", constants)
    run.run("markov", markov)
    run.run("cauchy_schwarz", cauchy_schwarz)


def suite_semigroup(geo: Geometry, cfg: SuiteConfig, run: Runner) -> None:
    s, tol = geo.space, cfg.tolerances

    def spectral(rng):
        d = geo.decomp
        rows = []
        for k in range(6):
            for j in range(20):
                t = 4.0 * 2.0 ** -j
                rows.append(reports.leq(f"k={k},t={t:.6g}", ss.heat_derivative_norm(d, k, t),
                                        ss.spectral_bound(k, t), abs_tol=tol["spectral"]))
        return rows

    def law(rng):
        d, rows = geo.decomp, []
        for a, b in ((0.1, 0.3), (0.5, 1.0), (1.0, 2.0)):
            f = rng.normal(size=s.n)
            lhs = ss.apply_heat(d, a, ss.apply_heat(d, b, f))
            err = ss.norm(s, lhs - ss.apply_heat(d, a + b, f))
            rows.append(reports.close(f"s={a:g},t={b:g}", err, 0.0,
                                      abs_tol=tol["semigroup"] * ss.norm(s, f)))
        return rows

    def contraction(rng):
        d, rows = geo.decomp, []
        f = rng.normal(size=s.n)
        for t in cfg.times(geo):
            rows.append(reports.leq(f"t={t:.6g}", ss.norm(s, ss.apply_heat(d, t, f)),
                                    ss.norm(s, f), rel_tol=tol["semigroup"]))
        return rows

    def positivity(rng):
        d, rows = geo.decomp, []
        f = np.abs(rng.normal(size=s.n))
        for t in cfg.times(geo):
            h = ss.apply_heat(d, t, f)
            rows.append(reports.leq(f"t={t:.6g}", -float(h.min()), 0.0,
                                    abs_tol=tol["semigroup"] * float(f.max())))
        return rows

    run.run("spectral_bound", spectral)
    run.run("semigroup_law", law)
    run.run("contraction", contraction)
    run.run("positivity", positivity)


def suite_cutoff(geo: Geometry, cfg: SuiteConfig, run: Runner) -> None:
    s, tol = geo.space, cfg.tolerances
    V = VertexSubset.of(s, indices=[geo.c])
    eta = ct.ramp_profile(s, V, 2)

    for c1 in (0.05, 0.2):
        tag = f"c1={c1:g}"

        def tight(rng, c1=c1):
            cert = ct.certify_cutoff(s, eta, c1)
            return ct.tightness_check(s, cert, n_samples=10_000, rng=rng,
                                      gap_tol=tol["cutoff_gap"])

        def valid(rng, c1=c1):
            cert = ct.certify_cutoff(s, eta, c1)
            rep = ct.verify_certificate(s, cert, rng.normal(size=(s.n, 100)),
                                        rel_tol=tol["cutoff_rel"])
            rep.extend(ct.verify_certificate(s, cert, cert.witness[:, None],
                                             rel_tol=tol["cutoff_rel"]), prefix="witness,")
            return rep

        def gradient(rng, c1=c1):
            cert = ct.certify_cutoff(s, eta, c1)
            rep = reports.Report("gradient")
            for i in range(20):
                rep.extend(ct.gradient_inequality_check(s, cert, rng.normal(size=s.n),
                                                        rel_tol=tol["cutoff_rel"]),
                           prefix=f"v{i:02d},")
            return rep

        run.run(f"tightness,{tag}", tight)
        run.run(f"certificate,{tag}", valid)
        run.run(f"gradient,{tag}", gradient)

    def lemmas(rng):
        cert = ct.certify_cutoff(s, eta, 0.05)
        rep = reports.Report("lemmas")
        rep.extend(ct.lemma_check(s, ct.combine(s, cert, cert, "product", rng=rng)),
                   prefix="product,")
        far = VertexSubset.of(s, indices=[_finite_argmax(geo.dist)])
        other = ct.certify_cutoff(s, ct.ramp_profile(s, far, 2), 0.05)
        rep.extend(ct.lemma_check(s, ct.combine(s, cert, other, "sum", rng=rng)), prefix="sum,")
        return rep

    run.run("lemmas", lemmas)


def _boundary_profiles() -> dict:
    return {"poly": ws.BoundaryProfile((1.0, 0.5, -0.3)),
            "trig": ws.BoundaryProfile((0.0,), ((1.0, 1.0, 0.0),))}


def suite_weak(geo: Geometry, cfg: SuiteConfig, run: Runner) -> None:
    s, tol = geo.space, cfg.tolerances
    g = ws.TimeGrid(0.0, 1.0, 257)

    for name, profile in _boundary_profiles().items():
        def case(rng, profile=profile):
            U = geo.local_ball()
            u = ws.generate_local_solution(s, U, profile, g)
            f = ws.zero_field(s, g)
            basis = ws.interior_basis(s, U.members, g)
            rows = [reports.leq(f"k={k}",
                                ws.verify_derivative_regularity(s, u, f, int(k), basis)
                                .residual.value, tol["residual"]) for k in cfg.k]
            bumped = ws.residual_norm(s, ws.perturb(u, geo.c, 1e-3), f, basis).value
            rows.append(reports.leq("perturbed", tol["sensitivity"], bumped))
            return rows

        run.run(f"local_solution,{name}", case)


def _smooth_nonsolution(geo: Geometry, grid: ws.TimeGrid) -> ws.SpaceTimeField:
    s = geo.space
    end = _finite_argmax(geo.dist)
    d = s.hop_distances(_onehot(s, end))
    x = np.where(np.isfinite(d), d, 0.0) / max(1.0, float(np.max(d[np.isfinite(d)])))
    return ws.SpaceTimeField(grid, lambda t, k: np.outer(np.cos(np.asarray(t) + np.pi * k / 2),
                                                         np.sin(np.pi * x)),
                             np.ones(s.n, bool))


def suite_mollifier(geo: Geometry, cfg: SuiteConfig, run: Runner) -> None:
    s, tol = geo.space, cfg.tolerances
    taus = cfg.taus(geo)
    ratio = tol["bounded_ratio"]
    state = {}

    def setup():
        if not state:
            U = geo.local_ball()
            g = ws.TimeGrid(0.0, 1.0, 257)
            u = ws.generate_local_solution(s, U, _boundary_profiles()["trig"], g,
                                           u0_interior=np.zeros(s.n))
            mcfg = ml.nested_config(s, U.members, (0.0, 1.0),
                                    VertexSubset.of(s, indices=[geo.c]))
            state.update(u=u, cfg=mcfg)
        return state["u"], state["cfg"]

    def convergence(rng):
        w = _smooth_nonsolution(geo, ws.TimeGrid(0.0, 1.0, 65))
        tab = ml.convergence_sweep(geo.decomp, w, ml.BUMP, taus)
        l2 = tab.column("l2_norm")
        rows = [reports.close("slope", tab.summary["slope"], 1.0, abs_tol=tol["slope"])]
        rows += [reports.leq(f"monotone,tau={t:.6g}", b, a)
                 for t, a, b in zip(taus[1:], l2[:-1], l2[1:])]
        return rows

    def cauchy(rng):
        u, mcfg = setup()
        l2 = ml.cauchy_l2_sweep(geo.decomp, mcfg, u, tau_list=taus)
        en = ml.cauchy_energy_sweep(geo.decomp, mcfg, u, taus, l2)
        rows = []
        for k in range(mcfg.n + 1):
            a, b = l2.summary[f"k={k}"], en.summary[f"k={k}"]
            rows.append(reports.leq(f"l2,k={k}", a["max"], ratio * a["median"]))
            rows.append(reports.leq(f"energy_sqrt_tau,k={k}", b["max"], ratio * b["median"]))
        return rows

    def limit(rng):
        u, mcfg = setup()
        return ml.mollifier_limit_check(geo.decomp, mcfg, u, tau_list=taus)

    run.run("convergence", convergence)
    run.run("cauchy", cauchy)
    run.run("limit", limit)


def suite_gaussian(geo: Geometry, cfg: SuiteConfig, run: Runner) -> None:
    s, tol = geo.space, cfg.tolerances
    V1 = VertexSubset.of(s, indices=[geo.c])
    V2 = geo.far_singleton(8)

    def assumption(rng):
        return gb.assumption_check(geo.decomp, V1, V2, list(cfg.a), 0, cfg.times(geo))

    def takeda(rng):
        return gb.takeda_check(geo.decomp, V1, V2, TAKEDA_TIMES)

    def gronwall(rng):
        rep = reports.Report("gronwall")
        for width, c1 in ((2, 0.05), (3, 0.2)):
            phi = ct.ramp_profile(s, V1, width)
            lam = 1 / math.sqrt(c1)
            cert = gb.certify_perturbation(s, phi, lam, c1)
            rep.extend(gb.davies_gronwall_check(geo.decomp, cert, lam, rng.normal(size=s.n),
                                                np.linspace(0, 2, 20), slack=tol["gronwall"]),
                       prefix=f"width={width},")
        return rep

    def derivative(rng):
        h = gb.hop_distance(s, V1, V2)
        phi = ct.ramp_profile(s, V1, h)
        gmax = float((dc.gamma_mass(s, phi, phi) / s.measure).max())
        return gb.derivative_bound_check(geo.decomp, V1, V2, 3, (1.5 * gmax, 0.0),
                                         DERIVATIVE_TIMES, phi=phi,
                                         match_tol=tol["cauchy_match"])

    run.run("assumption", assumption)
    run.run("takeda", takeda)
    run.run("gronwall", gronwall)
    run.run("derivative", derivative)


def suite_ancient(geo: Geometry, cfg: SuiteConfig, run: Runner) -> None:
    s = geo.space
    state = {}

    def setup():
        if not state:
            x = an.lattice_position(s)
            V = VertexSubset.of(s, mask=np.abs(x) <= 5)
            ex = ct.build_exhaustion(s, V, 1 / 16, 1.0, max_sets=12)
            half = int(np.abs(x).max())
            fields = {"quadratic": an.make_caloric_polynomial(s, x ** 2).field(),
                      "quartic": an.make_caloric_polynomial(s, x ** 4).field()}
            state.update(x=x, V=V, ex=ex, fields=fields, half=half)
        return state

    def exponential(st):
        radius = min(200, st["half"] - 50)
        if radius < 60:
            raise PreconditionError("lattice too short for the exponential window")
        return an.make_exponential_ancient(s, 1.0, window=np.abs(st["x"]) <= radius)

    def caccioppoli(rng):
        st = setup()
        fields = dict(st["fields"], exponential=exponential(st))
        return an.caccioppoli_sweep(s, fields, st["ex"], i_list=(1, 2), r_list=(0.5, 1.0),
                                    J_list=((-1.0, 0.0),), k_list=(1, 2))

    def lemma(rng):
        st = setup()
        return an.technical_lemma_check(s, st["fields"]["quadratic"], st["ex"].cutoffs[1])

    def structure(rng):
        st = setup()
        family = an.exhaustion_family(s, st["V"], depth=16)
        return an.polynomial_structure_check(s, st["fields"]["quadratic"], family)

    def taylor(rng):
        st = setup()
        return an.taylor_remainder_check(s, exponential(st), st["V"], a=-1.0, k_max=25,
                                         exhaustion=st["ex"])

    def dimension(rng):
        rep = reports.Report("dimension")
        for d in cfg.k:
            rep.extend(an.dimension_bound_check(s, int(d)), prefix=f"d={int(d)},")
        return rep

    run.run("caccioppoli", caccioppoli)
    run.run("technical_lemma", lemma)
    run.run("structure", structure)
    run.run("taylor", taylor)
    run.run("dimension", dimension)


SUITE_FUNCS = {"core": suite_core, "semigroup": suite_semigroup, "cutoff": suite_cutoff,
               "weak": suite_weak, "mollifier": suite_mollifier, "gaussian": suite_gaussian,
               "ancient": suite_ancient}


@dataclass
class SuiteReport:
    rows: list
    config: dict
    version: str = __version__

    def counts(self, suite: str | None = None) -> dict:
        out = {v: 0 for v in reports.VERDICTS}
        for r in self.rows:
            if suite is None or r.suite == suite:
                out[r.verdict] += 1
        return out

    @property
    def exit_code(self) -> int:
        return EXIT_FAIL if any(r.verdict == reports.FAIL for r in self.rows) else EXIT_OK


def run_suites(cfg: SuiteConfig) -> SuiteReport:
    """Run the selected suites; rows come back sorted by (suite, case id)."""
    cfg.validate()
    names = SUITES if cfg.suite == "all" else (cfg.suite,)
    geometries = {}
    rows = []
    for name in names:
        spec = cfg.space or DEFAULT_SPACES[name]
        key = json.dumps(spec, sort_keys=True)
        if key not in geometries:
            geometries[key] = Geometry(build_space(spec))
        runner = Runner(name, cfg.seed)
        SUITE_FUNCS[name](geometries[key], cfg, runner)
        rows.extend(runner.rows)
    rows.sort(key=lambda r: (r.suite, r.case))
    return SuiteReport(rows, cfg.echo())


# --- serialisation ---------------------------------------------------------------------------

def fmt(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.12g}"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return float(fmt(x)) if math.isfinite(x) else fmt(x)
    if obj is None or isinstance(obj, str):
        return obj
    return str(obj)


def to_csv(rep: SuiteReport, timings: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rep.rows:
        w.writerow([r.suite, r.case, fmt(r.lhs), fmt(r.rhs), fmt(r.margin), r.verdict,
                    f"{r.runtime_ms:.3f}" if timings else ""])
    return buf.getvalue()


def to_json(rep: SuiteReport, timings: bool = False) -> str:
    suites = sorted({r.suite for r in rep.rows})
    doc = {
        "artifact": "caloric-lab",
        "version": rep.version,
        "seed": rep.config["seed"],
        "config": rep.config,
        "summary": dict(rep.counts(), exit_code=rep.exit_code),
        "suites": {name: rep.counts(name) for name in suites},
        "rows": [dict({"suite": r.suite, "case": r.case, "lhs": r.lhs, "rhs": r.rhs,
                       "margin": r.margin, "verdict": r.verdict, "detail": r.detail},
                      **({"runtime_ms": r.runtime_ms} if timings else {}))
                 for r in rep.rows],
    }
    return json.dumps(_jsonable(doc), indent=1, sort_keys=True) + "\n"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# --- sweeps ----------------------------------------------------------------------------------

def _series_csv(points: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("series", "x", "y"))
    for series, x, y in sorted(points, key=lambda p: (p[0], p[1])):
        w.writerow([series, fmt(x), fmt(y)])
    return buf.getvalue()


def sweep_tau(geo: Geometry, cfg: SuiteConfig) -> tuple[list, dict]:
    taus = cfg.taus(geo)
    s = geo.space
    w = _smooth_nonsolution(geo, ws.TimeGrid(0.0, 1.0, 65))
    conv = ml.convergence_sweep(geo.decomp, w, ml.BUMP, taus)
    points = [("convergence_l2", t, v) for t, v in zip(taus, conv.column("l2_norm"))]
    U = geo.local_ball()
    g = ws.TimeGrid(0.0, 1.0, 257)
    u = ws.generate_local_solution(s, U, _boundary_profiles()["trig"], g,
                                   u0_interior=np.zeros(s.n))
    mcfg = ml.nested_config(s, U.members, (0.0, 1.0), VertexSubset.of(s, indices=[geo.c]))
    l2 = ml.cauchy_l2_sweep(geo.decomp, mcfg, u, tau_list=taus)
    en = ml.cauchy_energy_sweep(geo.decomp, mcfg, u, taus, l2)
    fits = {"convergence_l2": {"slope": conv.summary["slope"]}}
    ratio = cfg.tolerances["bounded_ratio"]
    for k in range(mcfg.n + 1):
        for key, col in (("l2", "l2_norm"), ("energy_sqrt_tau", "scaled_value")):
            vals = l2.column(col, k=k)
            points += [(f"{key},k={k}", t, v) for t, v in zip(l2.column("tau", k=k), vals)]
        b = en.summary[f"k={k}"]
        fits[f"energy,k={k}"] = {"slope": b["slope"], "max": b["max"], "median": b["median"],
                                 "bounded": bool(b["max"] <= ratio * b["median"])}
    return points, fits


def sweep_t(geo: Geometry, cfg: SuiteConfig) -> tuple[list, dict]:
    s = geo.space
    V1 = VertexSubset.of(s, indices=[geo.c])
    V2 = geo.far_singleton(8)
    ts = np.sort(cfg.times(geo))
    tab = gb.masked_heat_table(geo.decomp, V1, V2, 2, ts)
    points, fits = [], {"hop_distance": tab.hop_distance}
    for n in range(3):
        vals = np.array([tab.values[(n, float(t))] for t in ts])
        points += [(f"masked,n={n}", t, v) for t, v in zip(ts, vals)]
        fits[f"n={n}"] = {"small_t_exponent": gb.small_t_exponent(ts[:4], vals[:4])}
    return points, fits


def sweep_refinement(spec: dict, levels: int, cfg: SuiteConfig) -> tuple[list, dict]:
    if spec.get("kind") != "path":
        raise UsageError("the refinement axis needs a --path base space")
    n0 = int(spec["n"])
    if n0 < 17:
        raise UsageError("refinement base path needs at least 17 vertices")
    points, fits = [], {}
    for level in range(levels):
        scale = 2 ** level
        p = build_path((n0 - 1) * scale + 1, conductance=float(scale), measure=1.0 / scale)
        c = (n0 - 1) // 2 * scale
        V1 = VertexSubset.of(p, indices=[c - 4 * scale])
        V2 = VertexSubset.of(p, indices=[c + 4 * scale])
        d = ss.decompose(p)
        tak = gb.takeda_check(d, V1, V2, TAKEDA_TIMES)
        ass = gb.assumption_check(d, V1, V2, list(cfg.a), 0, cfg.times())
        h = 1.0 / scale
        win = tak.summary["window"]
        points += [("takeda_lower", h, win["lower"]), ("takeda_upper", h, win["upper"]),
                   ("validity_ceiling", h, ass.summary["validity_ceiling"][0]),
                   ("feasibility_bound", h, ass.summary["feasibility_bound"][0])]
        fits[f"level={level}"] = {"vertices": p.n, "window": win,
                                  "fitted_exponent": ass.summary["fitted_exponent"][0]}
    lowers = [fits[f"level={i}"]["window"]["lower"] for i in range(levels)]
    fits["window_grows"] = bool(all(b <= a for a, b in zip(lowers, lowers[1:])))
    return points, fits


def sweep_n_exhaustion(geo: Geometry, n_list: tuple) -> tuple[list, dict]:
    s = geo.space
    x = an.lattice_position(s)
    V = VertexSubset.of(s, mask=np.abs(x) <= 5)
    family = an.exhaustion_family(s, V, depth=16, n_list=n_list)
    u = an.make_caloric_polynomial(s, x ** 2).field()
    prof = an.fit_polynomial_growth(an.growth_profile(s, u, family))
    points = []
    for a, T in enumerate(prof.T_list):
        for b, i in enumerate(prof.i_list):
            points += [(f"T={T:g},i={i}", n, prof.values[a, b, c])
                       for c, n in enumerate(prof.n_list)]
    fit = {k: v for k, v in prof.fit.items() if k in ("d_u", "b_u", "C")}
    return points, {"polynomial_growth": fit}


# --- command line ----------------------------------------------------------------------------

def _split_list(text, what: str, cast=float) -> tuple:
    if isinstance(text, (list, tuple)):
        items = list(text)
    else:
        items = [p for p in str(text).split(",") if p.strip()]
    try:
        return tuple(cast(v) for v in items)
    except (TypeError, ValueError):
        raise UsageError(f"cannot parse {what} list {text!r}") from None


def _parse_tols(pairs) -> dict:
    out = {}
    for item in pairs:
        name, sep, value = str(item).partition("=")
        if not sep:
            raise UsageError(f"--tol expects NAME=VALUE, got {item!r}")
        try:
            out[name.strip()] = float(value)
        except ValueError:
            raise UsageError(f"tolerance {name} is not a number: {value!r}") from None
    return out


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError("config file must hold a JSON object")
    return doc


def _merged(opts: dict) -> dict:
    """Config-file values overridden by every flag that was actually given."""
    merged = _load_config(opts.pop("config", None))
    for k, v in opts.items():
        if v is not None and v != ():
            merged[k] = v
    return merged


def _config_from(merged: dict) -> SuiteConfig:
    cfg = SuiteConfig()
    if "suite" in merged:
        cfg.suite = str(merged["suite"])
    cfg.space = space_spec(merged.get("path"), merged.get("grid"), merged.get("gasket"),
                           merged.get("product"), merged.get("space"))
    tol = merged.get("tol", {})
    tol = dict(tol) if isinstance(tol, dict) else _parse_tols(tol)
    try:
        cfg.tolerances = dict(DEFAULT_TOLS, **{str(k): float(v) for k, v in tol.items()})
    except (TypeError, ValueError):
        raise UsageError(f"tolerances must be numbers: {tol!r}") from None
    for name, cast in (("tau", float), ("t", float), ("k", int), ("a", float)):
        if name in merged:
            setattr(cfg, name, _split_list(merged[name], name, cast))
    if "seed" in merged:
        try:
            cfg.seed = int(merged["seed"])
        except (TypeError, ValueError):
            raise UsageError(f"seed must be an integer, got {merged['seed']!r}") from None
    return cfg.validate()


def _guard(fn):
    """Map library errors onto the exit-code contract."""
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ResourceError as exc:
            click.echo(f"resource cap exceeded: {exc}", err=True)
            sys.exit(EXIT_RESOURCE)
        except (UsageError, ValidationError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_USAGE)
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def space_options(fn):
    fn = click.option("--space", "space", type=str, default=None,
                      help="JSON space file written by 'build'.")(fn)
    fn = click.option("--path", type=str, default=None, help="Unit path with N vertices.")(fn)
    fn = click.option("--grid", type=str, default=None, help="NX,NY grid on the unit square.")(fn)
    fn = click.option("--gasket", type=str, default=None, help="Sierpinski gasket level.")(fn)
    fn = click.option("--product", type=str, default=None,
                      help="Product of path:N / cycle:N factors, optional @weight.")(fn)
    fn = click.option("--config", type=str, default=None,
                      help="JSON file mirroring the flags; flags win.")(fn)
    return fn


def run_options(fn):
    fn = click.option("--suite", type=str, default=None,
                      help="core, semigroup, cutoff, weak, mollifier, gaussian, ancient or all.")(fn)
    fn = click.option("--seed", type=str, default=None, help="Unsigned 64-bit seed.")(fn)
    fn = click.option("--tol", type=str, multiple=True, help="NAME=VALUE override.")(fn)
    fn = click.option("--out", type=str, default=None, help="Output directory.")(fn)
    fn = click.option("--tau", type=str, default=None, help="Comma-separated tau grid.")(fn)
    fn = click.option("--t", "t", type=str, default=None, help="Comma-separated time grid.")(fn)
    fn = click.option("--k", "k", type=str, default=None, help="Comma-separated k grid.")(fn)
    fn = click.option("--a", "a", type=str, default=None, help="Comma-separated decay exponents.")(fn)
    return fn


@click.group()
@click.version_option(__version__, prog_name="caloric-lab")
def cli():
    """Verification lab for Dirichlet forms on weighted graphs."""


@cli.command()
@space_options
@click.option("--out", type=str, default=None, help="Directory for space.json; stdout if absent.")
@_guard
def build(**opts):
    """Build a space and serialise it as JSON."""
    merged = _merged(opts)
    spec = space_spec(merged.get("path"), merged.get("grid"), merged.get("gasket"),
                      merged.get("product"), merged.get("space"))
    if spec is None:
        raise UsageError("no space given")
    space = build_space(spec)
    text = space_to_json(space)
    if merged.get("out"):
        target = Path(merged["out"]) / "space.json"
        _write(target, text)
        click.echo(f"wrote {target}", err=True)
    else:
        click.echo(text, nl=False)
    click.echo(f"vertices: {space.n}", err=True)


def _emit(rep: SuiteReport, merged: dict, timings: bool) -> None:
    want_csv, want_json = bool(merged.get("csv")), bool(merged.get("json"))
    out = merged.get("out")
    if out:
        if not (want_csv or want_json):
            want_csv = want_json = True
        if want_csv:
            _write(Path(out) / "verify.csv", to_csv(rep, timings))
        if want_json:
            _write(Path(out) / "verify.json", to_json(rep, timings))
    else:
        if want_csv:
            click.echo(to_csv(rep, timings), nl=False)
        if want_json:
            click.echo(to_json(rep, timings), nl=False)
    for name in sorted({r.suite for r in rep.rows}):
        c = rep.counts(name)
        click.echo(f"{name:10s} PASS {c['PASS']:4d}  FAIL {c['FAIL']:3d}  "
                   f"XFAIL {c['XFAIL']:3d}  SKIP {c['SKIP']:3d}", err=True)
    for r in rep.rows:
        if r.verdict == reports.FAIL:
            click.echo(f"FAIL {r.suite} {r.case}: lhs={fmt(r.lhs)} rhs={fmt(r.rhs)}", err=True)


@cli.command()
@space_options
@run_options
@click.option("--json", "json_", is_flag=True, default=None, help="Write the JSON report.")
@click.option("--csv", "csv_", is_flag=True, default=None, help="Write the CSV report.")
@click.option("--timings", is_flag=True, default=False,
              help="Fill runtime_ms (makes output run-dependent).")
@_guard
def verify(timings, json_, csv_, **opts):
    """Run verification suites; exit 1 if any case fails."""
    opts.update(json=json_, csv=csv_)
    merged = _merged(opts)
    cfg = _config_from(merged)
    rep = run_suites(cfg)
    _emit(rep, merged, timings)
    sys.exit(rep.exit_code)


@cli.command()
@space_options
@run_options
@click.option("--axis", type=str, required=False, default=None,
              help="tau (mollifier), t or refinement (gaussian), n_exhaustion (ancient).")
@click.option("--levels", type=int, default=3, help="Refinement levels.")
@click.option("--n-list", "n_list", type=str, default="1,2,4,8", help="Exhaustion indices.")
@_guard
def sweep(axis, levels, n_list, **opts):
    """Sweep one parameter and write a table plus fitted slopes."""
    merged = _merged(opts)
    axis = axis or merged.get("axis")
    cfg = _config_from(merged)
    if cfg.suite not in AXES or axis not in AXES[cfg.suite]:
        allowed = ", ".join(f"{s}:{a}" for s, axs in AXES.items() for a in axs)
        raise UsageError(f"axis {axis!r} is not available for suite {cfg.suite!r} ({allowed})")
    spec = cfg.space or DEFAULT_SPACES[cfg.suite]
    if axis == "tau":
        points, fits = sweep_tau(Geometry(build_space(spec)), cfg)
    elif axis == "t":
        points, fits = sweep_t(Geometry(build_space(spec)), cfg)
    elif axis == "refinement":
        if levels < 2:
            raise UsageError("--levels must be at least 2")
        points, fits = sweep_refinement(spec, levels, cfg)
    else:
        ns = _split_list(n_list, "n", int)
        if not ns or any(n < 1 for n in ns):
            raise UsageError("--n-list needs positive integers")
        points, fits = sweep_n_exhaustion(Geometry(build_space(spec)), ns)
    table = _series_csv(points)
    summary = json.dumps(_jsonable({"suite": cfg.suite, "axis": axis, "seed": cfg.seed,
                                    "version": __version__, "fits": fits}),
                         indent=1, sort_keys=True) + "\n"
    if merged.get("out"):
        _write(Path(merged["out"]) / f"sweep_{cfg.suite}_{axis}.csv", table)
        _write(Path(merged["out"]) / f"sweep_{cfg.suite}_{axis}.json", summary)
    else:
        click.echo(table, nl=False)
        click.echo(summary, nl=False)


@cli.command()
@click.argument("source", type=str)
@click.option("--csv", "csv_", is_flag=True, default=False, help="Re-emit the rows as CSV.")
@_guard
def report(source, csv_):
    """Summarise a JSON report written by 'verify' (file or output directory)."""
    path = Path(source)
    if path.is_dir():
        path = path / "verify.json"
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        rows = [CaseRow(r["suite"], r["case"], _num(r["lhs"]), _num(r["rhs"]),
                        _num(r["margin"]), r["verdict"]) for r in doc["rows"]]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"cannot read report {path}: {exc}") from None
    rep = SuiteReport(rows, doc.get("config", {}), doc.get("version", "?"))
    if csv_:
        click.echo(to_csv(rep), nl=False)
    click.echo(f"version {rep.version}, seed {rep.config.get('seed')}")
    for name in sorted({r.suite for r in rows}):
        c = rep.counts(name)
        click.echo(f"{name:10s} PASS {c['PASS']:4d}  FAIL {c['FAIL']:3d}  "
                   f"XFAIL {c['XFAIL']:3d}  SKIP {c['SKIP']:3d}")
    for r in rows:
        if r.verdict == reports.FAIL:
            click.echo(f"FAIL {r.suite} {r.case}")
    sys.exit(rep.exit_code)


def _num(v) -> float:
    return float(v)


def main(argv=None) -> None:
    try:
        cli.main(args=argv, prog_name="caloric-lab", standalone_mode=True)
    except click.exceptions.Exit as exc:  # pragma: no cover - click handles this
        sys.exit(exc.exit_code)


if __name__ == "__main__":
    main()
