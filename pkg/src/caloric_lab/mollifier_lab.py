"""Heat-semigroup mollification in time and the approximating family u~_tau.

    A_tau w(s) = int rho_tau(s - t) H_{s-t} w(t) dt,   rho_tau(r) = rho(r / tau) / tau,

with rho a smooth bump supported in (1, 2).  Substituting r = s - t turns this
into  int_tau^{2 tau} rho_tau(r) H_r w(s - r) dr, so that time derivatives in s
fall on w only, and the window (tau, 2 tau) maps to fixed Gauss-Legendre nodes.
Everything is carried in the eigenbasis of the generator.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import legendre
from numpy.polynomial import polynomial as npoly
from scipy.integrate import quad

from . import reports
from .errors import UsageError, ValidationError
from .space_builders import DiscreteDirichletSpace, VertexSubset
from .spectral_semigroup import SpectralDecomposition
from .weak_solutions import SpaceTimeField, TemporalBump

DEFAULT_NODES = 64
MAX_ORDER = 4


class BumpProfile:
    """rho(t) = exp(-1 / ((t - 1)(2 - t))) / Z on (1, 2), zero elsewhere."""

    def __init__(self):
        self.Z = 1.0
        self.Z = quad(self._raw, 1.0, 2.0, epsabs=1e-15, epsrel=1e-14, limit=200)[0]

    @staticmethod
    def _raw(t):
        t = np.asarray(t, float)
        q = (t - 1.0) * (2.0 - t)
        inside = q > 0
        out = np.zeros_like(t)
        out[inside] = np.exp(-1.0 / q[inside])
        return out if out.ndim else float(out)

    def __call__(self, t) -> np.ndarray:
        return self._raw(t) / self.Z

    def derivative(self, t) -> np.ndarray:
        """rho'(t) = rho(t) (3 - 2t) / q(t)^2 with q = (t-1)(2-t)."""
        t = np.asarray(t, float)
        q = (t - 1.0) * (2.0 - t)
        out = np.zeros_like(t)
        inside = q > 0
        out[inside] = self(t[inside]) * (3.0 - 2.0 * t[inside]) / q[inside] ** 2
        return out

    def scaled(self, tau: float, r) -> np.ndarray:
        return self(np.asarray(r, float) / tau) / tau

    def scaled_bar(self, tau: float, r) -> np.ndarray:
        r = np.asarray(r, float)
        return r / tau ** 2 * self(r / tau)

    def d_tau_scaled(self, tau: float, r) -> np.ndarray:
        r = np.asarray(r, float)
        return -self(r / tau) / tau ** 2 - r * self.derivative(r / tau) / tau ** 3


@dataclass(frozen=True)
class PlateauProfile:
    """l(t) = 1 on [p0, p1], 0 outside (q0, q1), C^4 smoothstep ramps between."""

    q0: float
    p0: float
    p1: float
    q1: float

    def __post_init__(self):
        if not self.q0 < self.p0 <= self.p1 < self.q1:
            raise UsageError("plateau profile needs q0 < p0 <= p1 < q1")

    _STEP = (0, 0, 0, 0, 0, 126, -420, 540, -315, 70)  # x^5 (126 - 420x + ...), C^4

    def __call__(self, t, k: int = 0) -> np.ndarray:
        t = np.asarray(t, float)
        step = np.asarray(self._STEP, float)
        ds = npoly.polyder(step, k) if k else step
        up_x = (t - self.q0) / (self.p0 - self.q0)
        down_x = (self.q1 - t) / (self.q1 - self.p1)
        up = npoly.polyval(up_x, ds) / (self.p0 - self.q0) ** k
        down = npoly.polyval(down_x, ds) * (-1.0 / (self.q1 - self.p1)) ** k
        plateau = 1.0 if k == 0 else 0.0
        out = np.where((t > self.q0) & (t < self.p0), up, 0.0)
        out = np.where((t >= self.p0) & (t <= self.p1), plateau, out)
        return np.where((t > self.p1) & (t < self.q1), down, out)


@dataclass
class MollifierConfig:
    """Cut-off pair psi-bar = psi(x) w(s), eta-bar = eta(y) l(t) and the inner set J x V."""

    psi: np.ndarray
    w: TemporalBump
    eta: np.ndarray
    l: PlateauProfile
    J: tuple
    V: VertexSubset
    nodes: int = DEFAULT_NODES
    s_panels: int = 16
    s_nodes: int = 16
    n: int = 2
    tau_step: float = 1e-3
    nesting: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.n <= MAX_ORDER:
            raise UsageError(f"derivative order n must lie in 0..{MAX_ORDER}")


def check_nesting(space: DiscreteDirichletSpace, cfg: MollifierConfig, grid_interval,
                  domain: np.ndarray) -> dict:
    """J x V inside supp psi-bar, inside {eta-bar = 1}, inside supp eta-bar, inside I x U.

    Compact containment on a graph is read as: the 1-hop closure of the
    smaller set lies in the larger one.  The middle inclusion may touch.
    """
    a, b = grid_interval
    supp_psi = cfg.psi > 0
    ones_eta = cfg.eta >= 1
    supp_eta = cfg.eta > 0
    j0, j1 = cfg.J
    checks = {
        "V in supp psi": bool(np.all(supp_psi[space.neighbors_closure(cfg.V.members)])),
        "J in supp w": cfg.w.t0 < j0 < j1 < cfg.w.t1,
        "supp psi in {eta=1}": bool(np.all(ones_eta[supp_psi])),
        "supp w in {l=1}": cfg.l.p0 <= cfg.w.t0 and cfg.w.t1 <= cfg.l.p1,
        "supp eta in U": bool(np.all(domain[space.neighbors_closure(supp_eta)])),
        "supp l in I": a < cfg.l.q0 and cfg.l.q1 < b,
    }
    if not all(checks.values()):
        bad = [k for k, v in checks.items() if not v]
        raise ValidationError(f"cut-off nesting violated: {', '.join(bad)}")
    return checks


def nested_config(space: DiscreteDirichletSpace, domain, interval, centre: VertexSubset,
                  widths=(1, 1, 2), n: int = 2, nodes: int = DEFAULT_NODES) -> MollifierConfig:
    """Nested ring cut-offs around ``centre`` and nested time windows in ``interval``.

    Space: V = centre, psi ramps to 0 over widths[0] rings, eta = 1 on
    supp psi and ramps down over widths[2] rings.  Time: the interval is
    split into eighths; l has plateau [2/8, 6/8] and support (1/8, 7/8),
    w is supported on [2/8, 6/8] and J = [3/8, 5/8].
    """
    domain = np.ones(space.n, bool) if domain is None else np.asarray(domain, bool)
    d = space.hop_distances(centre.members)
    psi = np.clip(1.0 - d / (widths[0] + 1), 0.0, 1.0)
    core = d <= widths[0] + widths[1] - 1
    d_core = space.hop_distances(core)
    eta = np.clip(1.0 - d_core / (widths[2] + 1), 0.0, 1.0)
    a, b = interval
    L = b - a
    cfg = MollifierConfig(psi, TemporalBump(a + 2 * L / 8, a + 6 * L / 8), eta,
                          PlateauProfile(a + L / 8, a + 2 * L / 8, a + 6 * L / 8, a + 7 * L / 8),
                          (a + 3 * L / 8, a + 5 * L / 8), centre, nodes=nodes, n=n)
    cfg.nesting = check_nesting(space, cfg, interval, domain)
    return cfg


# --- window quadrature in the eigenbasis ---------------------------------------------------

def _gl(n: int):
    x, w = legendre.leggauss(n)
    return x, w


def _composite_gl(lo: float, hi: float, panels: int, per: int):
    x, w = _gl(per)
    edges = np.linspace(lo, hi, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    t = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    wt = (half[:, None] * w[None, :]).ravel()
    return t, wt


Coefficients = Callable[[np.ndarray, int], np.ndarray]  # (times, k) -> (len, modes)


def field_coefficients(decomp: SpectralDecomposition, u: SpaceTimeField,
                       eta: np.ndarray | None = None, l: PlateauProfile | None = None) -> Coefficients:
    """Modal coefficients of d^k/dt^k [l(t) eta u(t)] by the Leibniz rule."""
    space = decomp.space
    weight = space.measure * (np.ones(space.n) if eta is None else eta)
    proj = decomp.vectors.T * weight[None, :]

    def fn(t, k):
        t = np.asarray(t, float)
        if l is None:
            return u.at(t, k) @ proj.T
        total = np.zeros((t.size, decomp.vectors.shape[1]))
        for j in range(k + 1):
            lj = l(t, k - j)
            live = lj != 0
            if np.any(live):
                total[live] += math.comb(k, j) * lj[live, None] * (u.at(t[live], j) @ proj.T)
        return total

    return fn


def _window_nodes(profile: BumpProfile, tau: float, nodes: int, bar: bool = False):
    x, w = _gl(nodes)
    unit = 1.5 + 0.5 * x  # r / tau in (1, 2)
    r = tau * unit
    if bar:
        wts = 0.5 * w * unit * profile(unit)  # rho-bar_tau dr
    else:
        wts = 0.5 * w * profile(unit)  # rho_tau dr
    return r, wts


def mollified_modes(decomp: SpectralDecomposition, coeffs: Coefficients, profile: BumpProfile,
                    tau: float, s: np.ndarray, k: int = 0, nodes: int = DEFAULT_NODES) -> np.ndarray:
    """Modal coefficients of d_s^k int rho_tau(r) H_r g(s - r) dr at the times s."""
    s = np.atleast_1d(np.asarray(s, float))
    r, wts = _window_nodes(profile, tau, nodes)
    lam = decomp.eigenvalues
    T = (s[:, None] - r[None, :]).ravel()
    c = coeffs(T, k).reshape(s.size, r.size, -1)
    kernel = wts[:, None] * np.exp(-np.outer(r, lam))
    return np.einsum("srm,rm->sm", c, kernel)


def mollified_modes_dtau(decomp: SpectralDecomposition, coeffs: Coefficients,
                         profile: BumpProfile, tau: float, s: np.ndarray, k: int = 0,
                         nodes: int = DEFAULT_NODES) -> np.ndarray:
    """Analytic d_tau via  d_tau rho_tau = -d_r rho-bar_tau  and one integration by parts.

    d_tau int rho_tau(r) G(r) dr = int rho-bar_tau(r) G'(r) dr with
    G(r) = H_r g^{(k)}(s - r), so G' = -P G - H_r g^{(k+1)}(s - r).
    """
    s = np.atleast_1d(np.asarray(s, float))
    r, wts = _window_nodes(profile, tau, nodes, bar=True)
    lam = decomp.eigenvalues
    T = (s[:, None] - r[None, :]).ravel()
    c0 = coeffs(T, k).reshape(s.size, r.size, -1)
    c1 = coeffs(T, k + 1).reshape(s.size, r.size, -1)
    kernel = wts[:, None] * np.exp(-np.outer(r, lam))
    return np.einsum("srm,rm->sm", -lam[None, None, :] * c0 - c1, kernel)


def mollify(decomp: SpectralDecomposition, w: SpaceTimeField, profile: BumpProfile, tau: float,
            s: float, nodes: int = DEFAULT_NODES, return_flag: bool = False):
    """A_tau w(s) by quadrature over t in (s - 2 tau, s - tau) intersected with I.

    A window that misses I gives the zero function; with ``return_flag`` a
    second value reports whether that happened.
    """
    if not tau > 0:
        raise UsageError("tau must be positive")
    a, b = w.grid.a, w.grid.b
    if not a <= s <= b:
        raise UsageError("s must lie in I")
    lo, hi = max(s - 2 * tau, a), min(s - tau, b)
    n = decomp.space.n
    if hi <= lo:
        return (np.zeros(n), True) if return_flag else np.zeros(n)
    x, wx = _gl(nodes)
    t = 0.5 * (lo + hi) + 0.5 * (hi - lo) * x
    wt = 0.5 * (hi - lo) * wx * profile.scaled(tau, s - t)
    lam = decomp.eigenvalues
    c = decomp.coefficients(w.at(t).T)  # (modes, nodes)
    modal = (c * np.exp(-np.outer(lam, s - t))) @ wt
    out = decomp.vectors @ modal
    return (out, False) if return_flag else out


def adjoint_mollify(decomp: SpectralDecomposition, phi: SpaceTimeField, profile: BumpProfile,
                    tau: float, t: float, nodes: int = DEFAULT_NODES) -> np.ndarray:
    """A*_tau phi(t) = int rho_tau(s - t) H_{s-t} phi(s) ds over s in (t + tau, t + 2 tau) and I."""
    a, b = phi.grid.a, phi.grid.b
    lo, hi = max(t + tau, a), min(t + 2 * tau, b)
    if hi <= lo:
        return np.zeros(decomp.space.n)
    x, wx = _gl(nodes)
    s = 0.5 * (lo + hi) + 0.5 * (hi - lo) * x
    ws_ = 0.5 * (hi - lo) * wx * profile.scaled(tau, s - t)
    lam = decomp.eigenvalues
    c = decomp.coefficients(phi.at(s).T)
    return decomp.vectors @ ((c * np.exp(-np.outer(lam, s - t))) @ ws_)


# --- sweeps ----------------------------------------------------------------------------------

def _check_tau_list(tau_list: Sequence[float]) -> np.ndarray:
    taus = np.asarray(tau_list, float)
    if taus.size < 2 or np.any(taus <= 0) or np.any(np.diff(taus) >= 0):
        raise UsageError("tau list must be positive and strictly decreasing")
    if np.any(taus[:-1] / taus[1:] > 4):
        raise UsageError("tau grid too coarse: adjacent ratio above 4")
    return taus


@dataclass
class SweepTable:
    name: str
    rows: list  # dicts
    summary: dict = field(default_factory=dict)

    def column(self, key: str, **match) -> np.ndarray:
        return np.array([r[key] for r in self.rows
                         if all(r.get(k) == v for k, v in match.items())])

    def to_csv(self) -> str:
        cols = ["tau", "k", "l2_norm", "energy_norm", "scaled_value"]
        buf = io.StringIO()
        buf.write(",".join(cols) + "\n")
        for r in self.rows:
            buf.write(",".join("" if r.get(c) is None else repr(r.get(c)) for c in cols) + "\n")
        return buf.getvalue()

    def summary_json(self) -> str:
        return json.dumps(self.summary, sort_keys=True, default=float)


def loglog_slope(x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    keep = y > 0
    if keep.sum() < 2:
        return math.nan
    return float(np.polyfit(np.log(x[keep]), np.log(y[keep]), 1)[0])


def convergence_sweep(decomp: SpectralDecomposition, w: SpaceTimeField, profile: BumpProfile,
                      tau_list: Sequence[float], J: tuple | None = None, region=None,
                      nodes: int = DEFAULT_NODES, s_panels: int = 16) -> SweepTable:
    """||A_tau w - w|| in L^2(J x region) for each tau.

    J defaults to (a + 2 tau_max, b), which avoids the boundary layer where
    the window leaves I.
    """
    taus = _check_tau_list(tau_list)
    space = decomp.space
    a, b = w.grid.a, w.grid.b
    if J is None:
        J = (a + 2 * taus[0], b)
    if J[0] < a + 2 * taus[0]:
        raise UsageError("J reaches into the boundary layer of width 2 tau_max")
    mask = np.ones(space.n, bool) if region is None else np.asarray(region, bool)
    s, ws_ = _composite_gl(J[0], J[1], s_panels, 16)
    coeffs = field_coefficients(decomp, w)
    target = w.at(s)
    rows = []
    for tau in taus:
        approx = mollified_modes(decomp, coeffs, profile, tau, s, 0, nodes) @ decomp.vectors.T
        diff = (approx - target)[:, mask]
        err = math.sqrt(float(ws_ @ ((diff ** 2) @ space.measure[mask])))
        rows.append({"tau": float(tau), "k": 0, "l2_norm": err})
    errs = np.array([r["l2_norm"] for r in rows])
    scale = max(float(np.sqrt(ws_ @ ((target[:, mask] ** 2) @ space.measure[mask]))), 1e-300)
    monotone = bool(np.all(errs[1:] <= errs[:-1] * 1.05 + 1e-14 * scale))
    ratio = float(errs[-1] / errs[0]) if errs[0] > 0 else 0.0
    summary = {"slope": loglog_slope(taus, errs), "monotone": monotone,
               "last_over_first": ratio, "stalled": bool(errs[0] > 1e-12 * scale and ratio > 0.05),
               "J": list(J)}
    return SweepTable("convergence", rows, summary)


@dataclass
class _Prepared:
    decomp: SpectralDecomposition
    cfg: MollifierConfig
    coeffs: Coefficients
    s: np.ndarray
    ws: np.ndarray


def _prepare(decomp, cfg, u) -> _Prepared:
    coeffs = field_coefficients(decomp, u, cfg.eta, cfg.l)
    s, ws_ = _composite_gl(cfg.w.t0, cfg.w.t1, cfg.s_panels, cfg.s_nodes)
    return _Prepared(decomp, cfg, coeffs, s, ws_)


def _dtau_modes(p: _Prepared, tau: float, j: int) -> np.ndarray:
    h = p.cfg.tau_step * tau
    plus = mollified_modes(p.decomp, p.coeffs, BUMP, tau + h, p.s, j, p.cfg.nodes)
    minus = mollified_modes(p.decomp, p.coeffs, BUMP, tau - h, p.s, j, p.cfg.nodes)
    return (plus - minus) / (2 * h)


def _cutoff_derivative_field(p: _Prepared, tau: float, k: int, dtau: bool) -> np.ndarray:
    """d_s^k (psi-bar u~_tau), or its tau-derivative, at the s-nodes; shape (S, n)."""
    vec = p.decomp.vectors
    total = np.zeros((p.s.size, vec.shape[0]))
    for j in range(k + 1):
        modes = (_dtau_modes(p, tau, j) if dtau
                 else mollified_modes(p.decomp, p.coeffs, BUMP, tau, p.s, j, p.cfg.nodes))
        total += math.comb(k, j) * p.cfg.w(p.s, k - j)[:, None] * (modes @ vec.T)
    return total * p.cfg.psi[None, :]


def _norms(p: _Prepared, F: np.ndarray):
    space = p.decomp.space
    l2 = math.sqrt(max(float(p.ws @ ((F ** 2) @ space.measure)), 0.0))
    K = space.stiffness()
    energy = np.einsum("sn,sn->s", F, (K @ F.T).T)
    return l2, math.sqrt(max(float(p.ws @ energy), 0.0))


def _boundedness(values: np.ndarray) -> dict:
    values = np.asarray(values, float)
    med = float(np.median(values))
    mx = float(values.max())
    if mx == 0.0:
        return {"max": 0.0, "median": 0.0, "ratio": 0.0, "bounded": True}
    return {"max": mx, "median": med, "ratio": mx / med if med > 0 else math.inf,
            "bounded": bool(mx <= 2 * med)}


def cauchy_l2_sweep(decomp: SpectralDecomposition, cfg: MollifierConfig, u: SpaceTimeField,
                    f: SpaceTimeField | None = None, tau_list=None) -> SweepTable:
    """||d_tau d_s^k (psi-bar u~_tau)||_{L^2} for k <= n over the tau sweep.

    ``f`` is accepted for symmetry with the residual checks and never read:
    u~_tau depends on u alone.
    """
    taus = _check_tau_list(tau_list if tau_list is not None else 2.0 ** -np.arange(3, 10))
    p = _prepare(decomp, cfg, u)
    rows = []
    for tau in taus:
        for k in range(cfg.n + 1):
            l2, en = _norms(p, _cutoff_derivative_field(p, tau, k, dtau=True))
            rows.append({"tau": float(tau), "k": k, "l2_norm": l2, "energy_norm": en,
                         "scaled_value": en * math.sqrt(tau)})
    table = SweepTable("cauchy_l2", rows)
    table.summary = {f"k={k}": _boundedness(table.column("l2_norm", k=k))
                     for k in range(cfg.n + 1)}
    return table


def cauchy_energy_sweep(decomp: SpectralDecomposition, cfg: MollifierConfig, u: SpaceTimeField,
                        tau_list=None, l2_table: SweepTable | None = None) -> SweepTable:
    """Energy norms of d_tau d_s^k (psi-bar u~_tau), their sqrt(tau) scaling and slope.

    Also integrates the L^2 norms over tau from the smallest swept tau up to
    each gamma by the trapezoid rule.
    """
    taus = _check_tau_list(tau_list if tau_list is not None else 2.0 ** -np.arange(3, 10))
    table = l2_table or cauchy_l2_sweep(decomp, cfg, u, None, taus)
    out = SweepTable("cauchy_energy", table.rows)
    summary = {}
    for k in range(cfg.n + 1):
        en = table.column("energy_norm", k=k)
        scaled = table.column("scaled_value", k=k)
        slope = loglog_slope(taus, en) if np.any(en > 0) else math.nan
        entry = _boundedness(scaled)
        entry["slope"] = slope
        entry["slope_ok"] = bool(math.isnan(slope) or slope >= -0.6)
        l2 = table.column("l2_norm", k=k)
        asc_t, asc_v = taus[::-1], l2[::-1]
        cumulative = [0.0]
        for i in range(1, asc_t.size):
            cumulative.append(cumulative[-1] + 0.5 * (asc_v[i] + asc_v[i - 1])
                              * (asc_t[i] - asc_t[i - 1]))
        entry["tau_integral"] = dict(zip((float(t) for t in asc_t), cumulative))
        summary[f"k={k}"] = entry
    out.summary = summary
    return out


def mollifier_limit_check(decomp: SpectralDecomposition, cfg: MollifierConfig, u: SpaceTimeField,
                          tau_list=None, floor: float = 1e-13) -> reports.Report:
    """||d_s^k u~_tau - d_t^k u||_{L^2(J x V)} per tau, with a fitted order per k.

    Errors below ``floor`` (relative to the size of d_t^k u) count as exact
    agreement and are left out of the fit.
    """
    taus = _check_tau_list(tau_list if tau_list is not None else 2.0 ** -np.arange(3, 10))
    space = decomp.space
    coeffs = field_coefficients(decomp, u, cfg.eta, cfg.l)
    s, ws_ = _composite_gl(cfg.J[0], cfg.J[1], 8, 16)
    V = cfg.V.members
    rep = reports.Report("mollifier_limit")
    orders = {}
    for k in range(cfg.n + 1):
        exact = u.at(s, k)[:, V]
        size = math.sqrt(float(ws_ @ ((exact ** 2) @ space.measure[V])))
        errs = []
        for tau in taus:
            approx = (mollified_modes(decomp, coeffs, BUMP, tau, s, k, cfg.nodes)
                      @ decomp.vectors.T)[:, V]
            errs.append(math.sqrt(float(ws_ @ (((approx - exact) ** 2) @ space.measure[V]))))
        errs = np.array(errs)
        live = errs > floor * max(size, 1.0)
        order = loglog_slope(taus[live], errs[live]) if live.sum() >= 2 else math.inf
        orders[k] = order
        rep.add(reports.Row(f"order_k={k}", order, 0.8, order - 0.8,
                            reports.PASS if order >= 0.8 else reports.FAIL,
                            {"errors": errs.tolist(), "taus": taus.tolist()}))
    rep.summary["orders"] = orders
    return rep


def d_tau_crosscheck(decomp: SpectralDecomposition, cfg: MollifierConfig, u: SpaceTimeField,
                     tau: float, k: int = 0) -> float:
    """Relative gap between the differenced and the analytic d_tau d_s^k u~_tau."""
    p = _prepare(decomp, cfg, u)
    fd = _dtau_modes(p, tau, k)
    exact = mollified_modes_dtau(decomp, p.coeffs, BUMP, tau, p.s, k, cfg.nodes)
    return float(np.max(np.abs(fd - exact)) / max(np.max(np.abs(exact)), 1e-300))


BUMP = BumpProfile()
