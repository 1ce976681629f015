"""Ancient solutions on long lattices and the Caccioppoli machinery around them.

Genuinely ancient, globally defined solutions such as x^2 + 2t do not exist on
a finite space (ker P^m = ker P for a symmetric PSD generator).  Every field
built here is therefore a local weak solution on an interior window of a long
path, defined for all t <= 0.  Each application of P costs one hop of window,
and the remaining window is tracked explicitly.

Checks follow a common pattern: integrals over time-space cylinders are
evaluated with composite Gauss-Legendre in time (exact for the polynomial
fields) and exact vertex sums in space, then compared against the explicit
constants 200(C + 1/r), 1200(C + 1/r)^2 and 5000.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.linalg import null_space

from . import reports
from .cutoff_toolkit import CutoffCertificate, Exhaustion, build_exhaustion
from .errors import PreconditionError, UsageError, ValidationError
from .space_builders import DiscreteDirichletSpace, VertexSubset, build_path
from .weak_solutions import (SpaceTimeField, TestFunction, TimeGrid, interior_vertices,
                             residual_norm, temporal_profiles, zero_field)

C1_DEFAULT = 1.0 / 16
GATE_TOL = 1e-8
VANISH_TOL = 1e-10
SHRINK_BUDGET = 50
MAX_EXPONENT = 300.0
GL_NODES = 16
_GL = leggauss(GL_NODES)


# --- lattice helpers ----------------------------------------------------------------

def _hop_counts(space: DiscreteDirichletSpace) -> np.ndarray:
    return np.bincount(space.edges.ravel(), minlength=space.n)


def lattice_position(space: DiscreteDirichletSpace, origin: int | None = None) -> np.ndarray:
    """Signed hop coordinate along a path, zero at ``origin`` (default: the middle vertex)."""
    counts = _hop_counts(space)
    ends = np.flatnonzero(counts == 1)
    if space.n < 2 or len(ends) != 2 or np.any(counts > 2):
        raise ValidationError("lattice coordinates need a path graph")
    mask = np.zeros(space.n, bool)
    mask[ends.min()] = True
    pos = space.hop_distances(mask)
    if origin is None:
        origin = int(np.flatnonzero(pos == (space.n - 1) // 2)[0])
    return pos - pos[origin]


def _uniform_ratio(space: DiscreteDirichletSpace) -> float:
    c, m = space.cond, space.measure
    if np.ptp(c) > 1e-12 * c.max() or np.ptp(m) > 1e-12 * m.max() or np.any(space.killing):
        raise ValidationError("exponential modes need constant conductance and measure, no killing")
    return float(c[0] / m[0])


def _as_mask(space: DiscreteDirichletSpace, window) -> np.ndarray:
    if window is None:
        counts = _hop_counts(space)
        return counts == counts.max()
    if isinstance(window, VertexSubset):
        return window.members.copy()
    window = np.asarray(window)
    if window.dtype == bool:
        if window.shape != (space.n,):
            raise UsageError("window mask has the wrong length")
        return window.copy()
    return VertexSubset.of(space, indices=window).members.copy()


def _windows(space: DiscreteDirichletSpace, base: np.ndarray):
    """Masks W_k = {dist(x, X minus base) >= k}; W_0 is all of X, W_1 = base."""
    if base.all():
        dist = np.full(space.n, np.inf)
    else:
        dist = space.hop_distances(~base)

    def at(k):
        return np.ones(space.n, bool) if k == 0 else dist >= k
    return at


# --- weak-residual gate ---------------------------------------------------------------

def gate(space: DiscreteDirichletSpace, u: SpaceTimeField, max_vertices: int = 101) -> dict:
    """Relative weak and strong residual of (d_t + P) u = 0 on the interior of u's domain.

    The weak residual uses vertex indicators times the standard temporal
    bumps at up to ``max_vertices`` evenly spread interior vertices.  The
    strong residual |d_t u + P u| is taken at every interior vertex and grid
    node.  Both are divided by max(1, sup |u|) over the grid.
    """
    verts = interior_vertices(space, u.domain)
    if verts.size == 0:
        raise PreconditionError("field domain has no interior vertex")
    t = u.grid.nodes
    U = u.at(t)
    scale = max(1.0, float(np.max(np.abs(U))))
    strong = u.at(t, 1) + (space.generator() @ U.T).T
    strong_rel = float(np.max(np.abs(strong[:, verts]))) / scale
    pick = verts[np.unique(np.linspace(0, verts.size - 1, min(max_vertices, verts.size)).round()
                           .astype(int))]
    basis = []
    for j, w in enumerate(temporal_profiles(u.grid)):
        for x in pick:
            psi = np.zeros(space.n)
            psi[x] = 1.0
            basis.append(TestFunction(psi, w, f"x{x}:w{j}"))
    weak = residual_norm(space, u, zero_field(space, u.grid, u.domain), basis)
    weak_rel = weak.value / scale
    return {"weak": weak_rel, "strong": strong_rel, "argmax": weak.argmax, "scale": scale,
            "ok": bool(weak_rel < GATE_TOL and strong_rel < GATE_TOL)}


def _require_gate(space: DiscreteDirichletSpace, u: SpaceTimeField) -> dict:
    g = u.metadata.get("gate")
    if g is None:
        g = gate(space, u)
        u.metadata["gate"] = g
    if not g["ok"]:
        raise PreconditionError(f"field fails the weak-residual gate: {g}")
    return g


# --- caloric polynomials ----------------------------------------------------------------

@dataclass
class CaloricPolynomial:
    """u(t, x) = sum_k u_k(x) t^k, a local solution on ``domain`` for all t <= 0."""

    space: DiscreteDirichletSpace
    coefficients: tuple
    domain: np.ndarray
    window_sizes: tuple  # |W_k| after k applications of P, k = 0 .. d+1
    defect: float  # relative recursion defect on the domain
    grid: TimeGrid
    metadata: dict = field(default_factory=dict)

    @property
    def degree(self) -> int:
        return len(self.coefficients) - 1

    @property
    def shrink(self) -> int:
        return self.degree + 1

    def taylor_coefficients(self) -> list:
        """a_k = k! u_k = d^k u / dt^k at t = 0."""
        return [math.factorial(k) * c for k, c in enumerate(self.coefficients)]

    def evaluate(self, t, k: int = 0) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, float))
        out = np.zeros((t.size, self.space.n))
        for j in range(k, self.degree + 1):
            fac = math.factorial(j) // math.factorial(j - k)
            out += fac * np.outer(t ** (j - k), self.coefficients[j])
        return out

    def field(self) -> SpaceTimeField:
        meta = dict(self.metadata, ancient=True, kind="caloric_polynomial",
                    degree=self.degree)
        return SpaceTimeField(self.grid, self.evaluate, self.domain.copy(), None,
                              "analytic", meta)


def make_caloric_polynomial(space: DiscreteDirichletSpace, u0, d_max: int = SHRINK_BUDGET,
                            window=None, T: float = 16.0, nodes: int = 257,
                            check_gate: bool = True) -> CaloricPolynomial:
    """Forward recursion u_{k+1} = -P u_k / (k + 1) until u_{k+1} vanishes on the window.

    ``window`` is where P acts as the lattice operator (default: vertices of
    full hop degree, i.e. away from the path ends).  u_k is then exact on
    the vertices at least k hops from the rest.
    """
    u0 = np.asarray(u0, float)
    if u0.shape != (space.n,):
        raise UsageError("u0 must be a vertex function")
    P = space.generator()
    pnorm = float(np.max(np.abs(P).sum(axis=1)))
    win = _windows(space, _as_mask(space, window))
    coeffs = [u0]
    sizes = [int(win(0).sum())]
    k = 0
    while True:
        nxt_win = win(k + 1)
        sizes.append(int(nxt_win.sum()))
        if not nxt_win.any():
            raise ValidationError(f"window exhausted after {k + 1} applications of P; "
                                  "use a longer lattice")
        nxt = -(P @ coeffs[k]) / (k + 1)
        tol = VANISH_TOL * max(1.0, pnorm * float(np.max(np.abs(coeffs[k][win(k)]))))
        if np.max(np.abs(nxt[nxt_win])) <= tol:
            break
        if k + 1 > d_max:
            raise ValidationError(f"recursion did not terminate by d_max={d_max}")
        coeffs.append(nxt)
        k += 1
    domain = win(k + 1)
    scale = max(1.0, max(float(np.max(np.abs(c[domain]))) for c in coeffs))
    defect = 0.0
    for j, c in enumerate(coeffs):
        target = (j + 1) * coeffs[j + 1] if j + 1 < len(coeffs) else 0.0
        resid = -(P @ c) - target
        defect = max(defect, float(np.max(np.abs(resid[domain]))) / (pnorm * scale))
    poly = CaloricPolynomial(space, tuple(coeffs), domain, tuple(sizes), defect,
                             TimeGrid(-T, 0.0, nodes))
    if check_gate:
        g = poly.metadata["gate"] = gate(space, poly.field())
        if not g["ok"]:
            raise ValidationError(f"caloric polynomial fails the residual gate ({g['strong']:.2e} "
                                  "relative); values may exceed exact float range, "
                                  "use a shorter lattice or a lower seed degree")
    return poly


def make_exponential_ancient(space: DiscreteDirichletSpace, theta: float, window=None,
                             origin: int | None = None, T: float = 16.0,
                             nodes: int = 513, check_gate: bool = True) -> SpaceTimeField:
    """u = exp(theta x + mu t), mu = 2 (c/m) (cosh theta - 1), on a uniform path."""
    if abs(theta) > 2:
        raise ValidationError("|theta| <= 2 is required")
    ratio = _uniform_ratio(space)
    x = lattice_position(space, origin)
    domain = _as_mask(space, window) & (_hop_counts(space) == 2)
    if not domain.any():
        raise ValidationError("window has no interior lattice vertex")
    exponent = float(np.max(np.abs(theta * x[domain])))
    if exponent > MAX_EXPONENT:
        raise ValidationError(f"projected exponent {exponent:.1f} exceeds {MAX_EXPONENT}; "
                              "pass a narrower window")
    mu = 2.0 * ratio * (math.cosh(theta) - 1.0)
    base = np.where(domain, np.exp(np.where(domain, theta * x, 0.0)), 0.0)

    def fn(t, k):
        t = np.atleast_1d(np.asarray(t, float))
        return mu ** k * np.outer(np.exp(mu * t), base)

    meta = {"ancient": True, "kind": "exponential", "theta": float(theta), "mu": mu,
            "exponent": exponent}
    u = SpaceTimeField(TimeGrid(-T, 0.0, nodes), fn, domain, None, "analytic", meta)
    if check_gate:
        g = u.metadata["gate"] = gate(space, u)
        if not g["ok"]:
            raise ValidationError(f"exponential mode fails the residual gate: {g}")
    return u


# --- cylinder integrals ------------------------------------------------------------------

def _time_nodes(a: float, b: float):
    panels = max(1, min(64, math.ceil((b - a) / 4.0)))
    x, w = _GL
    edges = np.linspace(a, b, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    t = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    wt = (half[:, None] * w[None, :]).ravel()
    return t, wt


def _mass(space, u: SpaceTimeField, W: np.ndarray, a: float, b: float, k: int = 0,
          weight=None) -> float:
    """int_a^b sum_{x in W} (d_t^k u)^2 m(x) [weight(t)] dt."""
    t, wt = _time_nodes(a, b)
    if weight is not None:
        wt = wt * weight(t)
    U = u.at(t, k)
    return float(wt @ ((U ** 2) @ (space.measure * W)))


def _energy(space, u: SpaceTimeField, W: np.ndarray, a: float, b: float):
    """(int Gamma(u,u)(W) dt, int sum_W u^2 k m dt) over [a, b]."""
    t, wt = _time_nodes(a, b)
    U = u.at(t)
    e0, e1 = space.edges[:, 0], space.edges[:, 1]
    D = U[:, e0] - U[:, e1]
    edge_w = 0.5 * space.cond * (W[e0].astype(float) + W[e1].astype(float))
    gam = float(wt @ ((D ** 2) @ edge_w))
    kill = float(wt @ ((U ** 2) @ (space.killing * space.measure * W)))
    return gam, kill


def _set(exhaustion: Exhaustion, i: int) -> np.ndarray:
    return exhaustion.sets[i - 1].members


def _require_depth(exhaustion: Exhaustion, u: SpaceTimeField, last: int, closure_of=None):
    if last > len(exhaustion.sets):
        raise PreconditionError(f"exhaustion has {len(exhaustion.sets)} sets, "
                                f"W_{last} is needed")
    W = _set(exhaustion, last)
    if np.any(W & ~u.domain):
        raise PreconditionError(f"W_{last} leaves the solution's window; "
                                "use a longer lattice or a shallower index")


def _require_time(u: SpaceTimeField, lo: float, hi: float):
    g = u.grid
    if hi > g.b + 1e-12:
        raise PreconditionError(f"time interval ends at {hi} beyond the field's {g.b}")
    if lo < g.a - 1e-12 and not u.metadata.get("ancient"):
        raise PreconditionError(f"time interval starts at {lo} before the field's {g.a}")


def _check_interval(J, r):
    c, b = map(float, J)
    if not c < b:
        raise UsageError("J must be a nonempty interval [c, b]")
    if not r > 0:
        raise UsageError("r must be positive")
    return c, b


def _require_certificates(exhaustion: Exhaustion, C: float, idx):
    if exhaustion.c1 > C1_DEFAULT + 1e-15:
        raise PreconditionError(f"exhaustion certified at C1 = {exhaustion.c1} > 1/16")
    for j in idx:
        c2 = exhaustion.cutoffs[j - 1].c2
        if c2 is None or c2 > C * (1 + 1e-12):
            raise PreconditionError(f"cut-off phi_{j} has c2 = {c2} > C = {C}")


# --- Caccioppoli --------------------------------------------------------------------------

def caccioppoli_constants(C: float, r: float) -> tuple:
    """(K1, K2) = (200 (C + 1/r), 1200 (C + 1/r)^2)."""
    s = C + 1.0 / r
    return 200.0 * s, 1200.0 * s * s


def iterated_coefficient(C: float, r: float, k: int) -> float:
    return (1200.0 * (C + 1.0 / r) ** 2) ** k


def caccioppoli_check(space: DiscreteDirichletSpace, u: SpaceTimeField, exhaustion: Exhaustion,
                      J=(-1.0, 0.0), r: float = 1.0, i: int = 1, C: float | None = None,
                      slack: float = 1e-9) -> reports.Report:
    """Both links of the chain d_t-energy <= K1 * gradient energy <= K2 * mass."""
    c, b = _check_interval(J, r)
    C = exhaustion.c if C is None else float(C)
    _require_gate(space, u)
    _require_depth(exhaustion, u, i + 3)
    _require_certificates(exhaustion, C, range(i, i + 3))
    _require_time(u, c - 2 * r, b)
    K1, K2 = caccioppoli_constants(C, r)
    dtu = _mass(space, u, _set(exhaustion, i), c, b, k=1)
    gam, kill = _energy(space, u, _set(exhaustion, i + 2), c - r, b)
    middle = gam + kill
    outer = _mass(space, u, _set(exhaustion, i + 3), c - 2 * r, b)
    rep = reports.Report("caccioppoli")
    rep.add(reports.leq(f"K1,i={i},r={r}", dtu, K1 * middle, rel_tol=1e-12, abs_tol=slack))
    rep.add(reports.leq(f"K2,i={i},r={r}", K1 * middle, K2 * outer, rel_tol=1e-12,
                        abs_tol=slack))
    rep.summary.update(K1=K1, K2=K2, C=C, r=r, i=i, J=[c, b],
                       integrals={"dtu_sq": dtu, "gamma": gam, "killing": kill,
                                  "middle": middle, "outer_mass": outer})
    return rep


def caccioppoli_iterate(space: DiscreteDirichletSpace, u: SpaceTimeField, exhaustion: Exhaustion,
                        J=(-1.0, 0.0), r: float = 1.0, i: int = 1, k: int = 1,
                        C: float | None = None, slack: float = 1e-9) -> reports.Report:
    """int_J int_{W_i} (d_t^k u)^2 <= (1200 (C + 1/r)^2)^k int_{J-2kr} int_{W_{i+3k}} u^2."""
    if k < 1:
        raise UsageError("k must be at least 1")
    c, b = _check_interval(J, r)
    C = exhaustion.c if C is None else float(C)
    if u.n_max is not None and u.n_max < k:
        raise PreconditionError(f"field has derivatives only up to order {u.n_max}")
    _require_gate(space, u)
    _require_depth(exhaustion, u, i + 3 * k)
    _require_certificates(exhaustion, C, range(i, i + 3 * k))
    _require_time(u, c - 2 * k * r, b)
    coef = iterated_coefficient(C, r, k)
    lhs = _mass(space, u, _set(exhaustion, i), c, b, k=k)
    mass = _mass(space, u, _set(exhaustion, i + 3 * k), c - 2 * k * r, b)
    rep = reports.Report("caccioppoli_iterate")
    rep.add(reports.leq(f"iterate,i={i},r={r},k={k}", lhs, coef * mass, rel_tol=1e-12,
                        abs_tol=slack))
    rep.summary.update(coefficient=coef, C=C, r=r, i=i, k=k, J=[c, b],
                       integrals={"dtku_sq": lhs, "outer_mass": mass})
    return rep


def caccioppoli_sweep(space: DiscreteDirichletSpace, fields: dict, exhaustion: Exhaustion,
                      i_list=(1,), r_list=(1.0,), J_list=((-1.0, 0.0),),
                      k_list=(1, 2)) -> reports.Report:
    """Every field against every admissible (i, r, J) and iteration depth k.

    Parameter combinations that the exhaustion or the window cannot host are
    recorded as SKIP rows.
    """
    rep = reports.Report("caccioppoli_sweep")
    for name, u in fields.items():
        for i in i_list:
            for r in r_list:
                for J in J_list:
                    tag = f"{name}:J=[{J[0]},{J[1]}]:"
                    runs = [(lambda: caccioppoli_check(space, u, exhaustion, J, r, i), "base")]
                    runs += [(lambda kk=kk: caccioppoli_iterate(space, u, exhaustion, J, r, i, kk),
                              f"k={kk}") for kk in k_list]
                    for run, label in runs:
                        try:
                            rep.extend(run(), prefix=tag)
                        except PreconditionError as exc:
                            rep.add(reports.Row(f"{tag}{label},i={i},r={r}", math.nan, math.nan,
                                                math.nan, reports.SKIP, {"reason": str(exc)}))
    return rep


# --- technical lemma ---------------------------------------------------------------------

@dataclass(frozen=True)
class TimeRamp:
    """l(t) = 1 on [c, b], cubic ramp up on (c - r, c), 0 before; |l'| <= 1.5 / r."""

    c: float
    r: float

    def __call__(self, t) -> np.ndarray:
        s = np.clip((np.asarray(t, float) - (self.c - self.r)) / self.r, 0.0, 1.0)
        return s * s * (3.0 - 2.0 * s)

    @property
    def max_slope(self) -> float:
        return 1.5 / self.r


def technical_lemma_check(space: DiscreteDirichletSpace, u: SpaceTimeField,
                          cert: CutoffCertificate, J=(-1.0, 0.0), r: float = 1.0,
                          C2: float | None = None, slack: float = 1e-9) -> reports.Report:
    """int int phibar^2 u^2 dGamma(phibar, phibar) <= (3 C2 + 1/r) int int phibar^2 u^2.

    phibar = phi(x) l(t) with phi the certified cut-off and l the ramp of
    ``TimeRamp``, supported in (c - r, b] and equal to 1 on J.
    """
    c, b = _check_interval(J, r)
    if not cert.c1 < 1.0 / 9:
        raise PreconditionError(f"C1 = {cert.c1} must be below 1/9")
    C2 = cert.c2 if C2 is None else float(C2)
    if C2 is None:
        raise PreconditionError("cut-off certificate is infeasible")
    phi = np.asarray(cert.values, float)
    if np.any((phi != 0) & ~u.domain):
        raise PreconditionError("supp phi leaves the solution's window")
    _require_gate(space, u)
    _require_time(u, c - r, b)
    l = TimeRamp(c, r)
    gphi = np.zeros(space.n)
    e0, e1 = space.edges[:, 0], space.edges[:, 1]
    w = 0.5 * space.cond * (phi[e0] - phi[e1]) ** 2
    np.add.at(gphi, e0, w)
    np.add.at(gphi, e1, w)
    # split at c so each panel integrates a polynomial in t
    lhs = mass = 0.0
    for lo, hi in ((c - r, c), (c, b)):
        t, wt = _time_nodes(lo, hi)
        U2 = u.at(t) ** 2
        lt = l(t)
        lhs += float((wt * lt ** 4) @ (U2 @ (phi ** 2 * gphi)))
        mass += float((wt * lt ** 2) @ (U2 @ (phi ** 2 * space.measure)))
    C0 = 3.0 * C2 + 1.0 / r
    rep = reports.Report("technical_lemma")
    rep.add(reports.leq(f"lemma,r={r}", lhs, C0 * mass, rel_tol=1e-12, abs_tol=slack,
                        ratio=lhs / mass if mass > 0 else 0.0))
    rep.summary.update(C0=C0, C1=cert.c1, C2=C2, r=r, J=[c, b], l_slope=l.max_slope,
                       lhs=lhs, mass=mass, ratio=lhs / mass if mass > 0 else 0.0)
    return rep


# --- growth profiles ---------------------------------------------------------------------

@dataclass
class GrowthProfile:
    """Measured (int_{[-T,0] x W_i^n} u^2)^{1/2} on a (T, i, n) grid and its fits."""

    T_list: tuple
    i_list: tuple
    n_list: tuple
    values: np.ndarray  # shape (len T, len i, len n)
    fit: dict = field(default_factory=dict)

    def value(self, T, i, n) -> float:
        return float(self.values[self.T_list.index(T), self.i_list.index(i),
                                 self.n_list.index(n)])


def exhaustion_family(space: DiscreteDirichletSpace, V: VertexSubset, depth: int,
                      n_list=(1, 2, 4, 8), c1: float = C1_DEFAULT) -> dict:
    """n -> exhaustion certified at (c1, C = 1/n) with ``depth`` proper sets."""
    return {n: build_exhaustion(space, V, c1, 1.0 / n, max_sets=depth) for n in n_list}


def growth_profile(space: DiscreteDirichletSpace, u: SpaceTimeField, exhaustions: dict,
                   T_list=tuple(2.0 ** np.arange(11)), i_list=None) -> GrowthProfile:
    n_list = tuple(sorted(exhaustions))
    if i_list is None:
        depth = min(len(exhaustions[n].sets) for n in n_list)
        i_list = tuple(i for i in range(1, depth + 1)
                       if all(not np.any(_set(exhaustions[n], i) & ~u.domain) for n in n_list))
        if not i_list:
            raise PreconditionError("no exhaustion set fits inside the solution's window")
    for n in n_list:
        for i in i_list:
            _require_depth(exhaustions[n], u, i)
    T_list = tuple(float(T) for T in T_list)
    vals = np.zeros((len(T_list), len(i_list), len(n_list)))
    for a, T in enumerate(T_list):
        t, wt = _time_nodes(-T, 0.0)
        U2 = u.at(t) ** 2
        for c, n in enumerate(n_list):
            masks = np.stack([_set(exhaustions[n], i) for i in i_list], axis=1)
            vals[a, :, c] = np.sqrt(wt @ (U2 @ (space.measure[:, None] * masks)))
    return GrowthProfile(T_list, tuple(i_list), n_list, vals)


def _require_monotone(profile: GrowthProfile):
    v = profile.values
    tol = 1e-12 * max(1.0, float(np.max(v)))
    if np.any(v < 0) or np.any(np.diff(v, axis=0) < -tol) or np.any(np.diff(v, axis=1) < -tol):
        raise PreconditionError("growth data is not monotone in T and i; refusing to fit")
    if np.any(v <= 0):
        raise PreconditionError("growth fit needs strictly positive data")


def _slope(x, y) -> tuple:
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
    rss = float(np.sum((A @ coef - y) ** 2))
    return float(coef[0]), rss


def fit_polynomial_growth(profile: GrowthProfile, tail: int = 4) -> GrowthProfile:
    """d_u, b_u from log-log slopes on the largest T and n values, then C_{u,V,i}.

    Each slope is the largest over the remaining axes, so the bound
    C_i max{T^d_u, n^b_u} with C_i raised to cover every sample holds on
    the whole grid.  The dominant term per sample is reported as the split.
    """
    _require_monotone(profile)
    logv = np.log(profile.values)
    logT = np.log(np.asarray(profile.T_list))
    logn = np.log(np.asarray(profile.n_list, float))
    tT = min(tail, len(logT))
    d_u, rss_T = -math.inf, 0.0
    for i in range(logv.shape[1]):
        for c in range(logv.shape[2]):
            s, rss = _slope(logT[-tT:], logv[-tT:, i, c])
            d_u, rss_T = max(d_u, s), rss_T + rss
    b_u, rss_n = 0.0, 0.0
    if len(logn) >= 2:
        tn = min(tail, len(logn))
        for a in range(logv.shape[0]):
            for i in range(logv.shape[1]):
                s, rss = _slope(logn[-tn:], logv[a, i, -tn:])
                b_u, rss_n = max(b_u, s), rss_n + rss
    d_u = max(d_u, 0.0)
    T = np.asarray(profile.T_list)[:, None, None]
    n = np.asarray(profile.n_list, float)[None, None, :]
    envelope = np.maximum(T ** d_u, n ** b_u)
    C_i = np.max(profile.values / envelope, axis=(0, 2))
    time_share = float(np.mean(T ** d_u >= n ** b_u))
    profile.fit = {"kind": "polynomial", "d_u": d_u, "b_u": b_u,
                   "C": {int(i): float(c) for i, c in zip(profile.i_list, C_i)},
                   "rss_time": rss_T, "rss_space": rss_n,
                   "time_dominated_share": time_share, "tail": tail}
    return profile


def fit_exponential_growth(profile: GrowthProfile, n=None) -> GrowthProfile:
    """log-linear regression log M ~ a + c_T T + c_i i at one n; c_u = max(c_T, c_i).

    ``c_dominating`` is the smallest c with int u^2 <= exp(c (T + i)) on all
    samples with T > 1, the normalization used by the Taylor majorant.
    """
    _require_monotone(profile)
    n = profile.n_list[0] if n is None else n
    col = profile.n_list.index(n)
    T = np.asarray(profile.T_list)
    ii = np.asarray(profile.i_list, float)
    TT, II = np.meshgrid(T, ii, indexing="ij")
    y = np.log(profile.values[:, :, col]).ravel()
    A = np.stack([np.ones(y.size), TT.ravel(), II.ravel()], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    c_T, c_i = float(coef[1]), float(coef[2])
    big = TT > 1
    if not big.any():
        raise PreconditionError("exponential growth needs samples with T > 1")
    integ = profile.values[:, :, col] ** 2
    c_dom = float(np.max(np.log(integ[big]) / (TT[big] + II[big])))
    profile.fit = {"kind": "exponential", "n": n, "c_T": c_T, "c_i": c_i,
                   "c_u": max(c_T, c_i), "c_dominating": max(c_dom, 0.0)}
    return profile


# --- polynomial structure ---------------------------------------------------------------

def decay_table(fit: dict, k: int, n_list=(1, 2, 4, 8), T: float = 1.0) -> list:
    """Rows (n, prefactor, bound) of (5000/n^2)^k (C_{1+3k} max{(ceil T + 2kn)^d_u, n^b_u})^2."""
    d_u, b_u = fit["d_u"], fit["b_u"]
    C = fit["C"].get(1 + 3 * k)
    out = []
    for n in n_list:
        pre = (5000.0 / n ** 2) ** k
        bound = None
        if C is not None:
            bound = pre * (C * max((math.ceil(T) + 2 * k * n) ** d_u, n ** b_u)) ** 2
        out.append({"n": n, "prefactor": pre, "ratio": pre / 5000.0 ** k, "bound": bound})
    return out


def polynomial_structure_check(space: DiscreteDirichletSpace, u: SpaceTimeField,
                               exhaustions: dict, T: float = 1.0,
                               profile: GrowthProfile | None = None,
                               scan_extra: int = 2) -> reports.Report:
    """Derivative scan on J x W_1 plus the (5000/n^2)^k decay table."""
    _require_gate(space, u)
    if profile is None:
        profile = growth_profile(space, u, exhaustions)
    if not profile.fit:
        fit_polynomial_growth(profile)
    fit = profile.fit
    d_u, b_u = fit["d_u"], fit["b_u"]
    floor_d = math.floor(d_u)
    n0 = min(exhaustions)
    W1 = _set(exhaustions[n0], 1)
    k_scan = floor_d + scan_extra
    norms = [math.sqrt(_mass(space, u, W1, -T, 0.0, k=k)) for k in range(k_scan + 1)]
    alive = [k for k, v in enumerate(norms) if v > VANISH_TOL]
    N = max(alive) if alive else 0
    rep = reports.Report("polynomial_structure")
    for k in range(floor_d + 1, k_scan + 1):
        rep.add(reports.leq(f"vanish,k={k}", norms[k], VANISH_TOL))
    rep.add(reports.leq("degree_vs_fit", N, floor_d, N=N, floor_d_u=floor_d))
    k_t = math.floor(d_u + b_u) + 1
    if 1 + 3 * k_t not in fit["C"]:
        raise PreconditionError(f"growth profile lacks i = {1 + 3 * k_t} for k = {k_t}")
    table = decay_table(fit, k_t, profile.n_list, T)
    for prev, nxt in zip(table, table[1:]):
        row = reports.leq(f"decay,k={k_t},n={nxt['n']}", nxt["bound"], prev["bound"])
        if not nxt["bound"] < prev["bound"]:
            row.verdict = reports.FAIL
        rep.add(row)
    verdict = f"POLYNOMIAL({N})" if N < k_scan else f"UNRESOLVED(>={k_scan})"
    rep.summary.update(verdict=verdict, N=N, d_u=d_u, b_u=b_u, floor_d_u=floor_d,
                       constructed_degree=u.metadata.get("degree"), derivative_norms=norms,
                       k_table=k_t, table=table, table_k2=decay_table(fit, 2, profile.n_list, T),
                       fit=fit)
    return rep


# --- dimension bound ---------------------------------------------------------------------

def _symmetric(space: DiscreteDirichletSpace) -> np.ndarray:
    s = 1.0 / np.sqrt(space.measure)
    K = space.stiffness().toarray()
    return s[:, None] * K * s[None, :]


def windowed_basis(d: int, length: int | None = None) -> dict:
    """Caloric polynomials seeded by x^j, j <= 2d, on a windowed unit path.

    Returns the rank of the coefficient stack (dimension of the family), the
    dimension of P-harmonic polynomials of position degree <= 2d, and the
    time degrees of the individual seeds.
    """
    if d < 0:
        raise UsageError("d must be nonnegative")
    length = 8 * d + 31 if length is None else length
    p = build_path(length)
    x = lattice_position(p)
    polys = [make_caloric_polynomial(p, x ** j, check_gate=False) for j in range(2 * d + 1)]
    common = np.logical_and.reduce([q.domain for q in polys])
    rows = []
    for q in polys:
        a = list(q.taylor_coefficients()) + [np.zeros(p.n)] * (d + 1 - len(q.coefficients))
        rows.append(np.concatenate([c[common] for c in a[:d + 1]]))
    stack = np.array(rows)
    rank = int(np.linalg.matrix_rank(stack / np.abs(stack).max(axis=1, keepdims=True)))
    inner = interior_vertices(p, common)
    cols = np.stack([x ** j for j in range(2 * d + 1)], axis=1)
    lap = (p.generator() @ cols)[inner]
    lap /= np.maximum(np.abs(cols[inner]).max(axis=0), 1.0)
    harmonic = int(null_space(lap, rcond=1e-12).shape[1])
    return {"d": d, "dimension": rank, "harmonic": harmonic,
            "time_degrees": [q.degree for q in polys], "length": length}


def dimension_bound_check(space: DiscreteDirichletSpace, d: int, b: int = 1,
                          windowed: bool = True) -> reports.Report:
    """dim ker P^{d+1} <= (d + 1) dim ker P on a boundaryless space, plus the windowed count."""
    if d < 0:
        raise UsageError("d must be nonnegative")
    if np.any(space.killing):
        raise PreconditionError("dimension check needs zero killing")
    S = _symmetric(space)
    K = null_space(S, rcond=1e-12)
    dim_H = int(K.shape[1])
    # ker S^{j+1} = {v : S v in ker S^j}; forming S^{d+1} would square the
    # conditioning and push small eigenvalues of long paths below the cut
    for _ in range(d):
        K = null_space(S - K @ (K.T @ S), rcond=1e-12)
    dim_P = int(K.shape[1])
    comps = space.n_components()
    rep = reports.Report("dimension_bound")
    rep.add(reports.leq(f"finite,d={d}", dim_P, (d + 1) * dim_H, dim_P=dim_P, dim_H=dim_H))
    degenerate = dim_P == dim_H == comps
    rep.summary.update(d=d, b=b, dim_P=dim_P, dim_H=dim_H, components=comps,
                       degenerate=degenerate)
    if degenerate:
        rep.summary["note"] = ("finite space: caloric polynomials reduce to harmonic functions; "
                               "see the windowed rows for the nontrivial count")
    if windowed:
        wb = windowed_basis(d)
        rep.add(reports.leq(f"windowed,d={d}", wb["dimension"], (d + 1) * wb["harmonic"],
                            **wb))
        rep.summary["windowed"] = wb
    return rep


# --- Taylor remainder ------------------------------------------------------------------

def taylor_majorant(a: float, k: int, c_u: float, j: int) -> tuple:
    """(|a|^{2k+1} / (k!)^2) 5000^{k+1} exp(c_u (|a| + j + 5(k+1))), clamped on overflow."""
    log_m = ((2 * k + 1) * math.log(abs(a)) - 2 * math.lgamma(k + 1)
             + (k + 1) * math.log(5000.0) + c_u * (abs(a) + j + 5 * (k + 1)))
    limit = math.log(np.finfo(float).max)
    if log_m > limit:
        return float(np.finfo(float).max), True
    return math.exp(log_m), False


def taylor_remainder_check(space: DiscreteDirichletSpace, u: SpaceTimeField, V: VertexSubset,
                           a: float = -1.0, k_max: int = 25, exhaustion: Exhaustion | None = None,
                           c_u: float | None = None, t_points: int = 201,
                           target: float = 1e-8) -> reports.Report:
    """Uniform-in-t L^2(V) remainder of the time Taylor polynomial against its majorant."""
    if not a < 0:
        raise UsageError("a must be negative")
    if not 0 <= k_max <= 30:
        raise UsageError("k_max must lie in [0, 30]")
    if np.any(V.members & ~u.domain):
        raise PreconditionError("V leaves the solution's window")
    _require_gate(space, u)
    if exhaustion is None:
        exhaustion = build_exhaustion(space, V, C1_DEFAULT, 1.0, max_sets=12)
    j = next((i for i in range(1, len(exhaustion.sets) + 1)
              if not np.any(V.members & ~_set(exhaustion, i))), None)
    if j is None:
        raise PreconditionError("V is not contained in any exhaustion set")
    if c_u is None:
        prof = growth_profile(space, u, {1: exhaustion}, T_list=(1.0, 2.0, 4.0, 8.0))
        c_u = fit_exponential_growth(prof).fit["c_dominating"]
    t = np.linspace(a, 0.0, t_points)
    m = space.measure * V.members
    U = u.at(t)
    derivs = u.at(np.zeros(1), 0)[0]
    partial = np.outer(np.ones_like(t), derivs)
    sup_u = float(np.max(np.sqrt((U ** 2) @ m)))
    floor = 1e-12 * max(1.0, sup_u)
    rem = []
    for k in range(k_max + 1):
        if k > 0:
            partial = partial + np.outer(t ** k / math.factorial(k), u.at(np.zeros(1), k)[0])
        rem.append(float(np.max(np.sqrt(((U - partial) ** 2) @ m))))
    rep = reports.Report("taylor_remainder")
    rep.add(reports.leq(f"remainder,k={k_max}", rem[-1], target))
    for k in range(1, k_max + 1):
        rep.add(reports.leq(f"monotone,k={k}", rem[k], rem[k - 1], abs_tol=floor))
    mu = u.metadata.get("mu")
    if mu is not None:
        norm0 = math.sqrt(float((derivs ** 2) @ m))
        for k in range(k_max + 1):
            tail = norm0 * (mu * abs(a)) ** (k + 1) / math.factorial(k + 1)
            env = math.exp(mu * abs(a)) * tail
            rep.add(reports.leq(f"envelope,k={k}", rem[k], env, abs_tol=floor))
            if tail > floor and rem[k] > floor:
                rep.add(reports.leq(f"tail_within_2x,k={k}", tail, 2 * rem[k]))
    majorants, clamped = [], False
    for k in range(k_max + 1):
        val, flag = taylor_majorant(a, k, c_u, j)
        majorants.append(val)
        clamped = clamped or flag
    for k in range(max(0, k_max - 4), k_max + 1):
        rep.add(reports.leq(f"majorant,k={k}", rem[k] ** 2, majorants[k]))
    turn = abs(a) * math.sqrt(5000.0 * math.exp(5.0 * c_u)) - 1.0
    rep.summary.update(a=a, k_max=k_max, c_u=c_u, j=j, mu=mu, remainders=rem,
                       majorants=majorants, clamped=clamped,
                       majorant_decreasing_from=max(0, math.ceil(turn)))
    return rep


# --- serialization ------------------------------------------------------------------------

def report_csv(rep: reports.Report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["case", "lhs", "rhs", "margin", "verdict"])
    for r in rep.rows:
        w.writerow([r.case, repr(float(r.lhs)), repr(float(r.rhs)), repr(float(r.margin)),
                    r.verdict])
    return buf.getvalue()


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        return None if not math.isfinite(x) else float(x)
    if isinstance(x, (np.integer, np.bool_)):
        return x.item()
    return x


def report_json(rep: reports.Report) -> str:
    doc = {"name": rep.name, "counts": rep.counts(), "summary": _jsonable(rep.summary)}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"
