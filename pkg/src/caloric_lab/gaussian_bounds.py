"""Off-diagonal L^2 decay of the heat semigroup between separated vertex sets.

The central quantity is

    G(n, t) = sup |<d^n/dt^n H_t g1, g2>_m|,

over g1 supported in V1 and g2 supported in V2, both of unit m-norm.  It is
the largest singular value of the block of (-P)^n H_t that couples V1 to V2,
taken in the m-weighted geometry.

For small t these blocks are tiny (about t^d / d! for sets d hops apart), well
below the absolute error floor of a spectral sum.  The default route therefore
builds H_t from a uniformized series.  With S = M^-1/2 K M^-1/2 and c at least
as large as every diagonal entry of S,

    exp(-t S) = exp(-c t) exp(t (cI - S)).

Here cI - S is entrywise nonnegative, so every term of the series is
nonnegative.  That keeps each entry accurate to a relative error of order eps.
"""

from __future__ import annotations

import csv
import functools
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from . import reports
from .cutoff_toolkit import (CutoffCertificate, PowerFit, certify_cutoff, intrinsic_distance,
                             minimal_c2)
from .errors import PreconditionError, UsageError, ValidationError
from .space_builders import DiscreteDirichletSpace, VertexSubset
from .spectral_semigroup import (SpectralDecomposition, apply_heat, apply_heat_complex,
                                 derivative_multiplier, norm)

MAX_DERIVATIVE = 4
R2_THRESHOLD = 0.9


# --- exact masked norms -----------------------------------------------------------

def symmetric_generator(space: DiscreteDirichletSpace) -> np.ndarray:
    root = np.sqrt(space.measure)
    S = space.stiffness().toarray() / root[:, None] / root[None, :]
    return 0.5 * (S + S.T)


def uniformized_heat(space: DiscreteDirichletSpace, t: float) -> np.ndarray:
    """exp(-t S) in the symmetric frame, entrywise accurate down to underflow."""
    if not t >= 0:
        raise UsageError("time must be nonnegative")
    return _uniformized_heat(space, float(t))


@functools.lru_cache(maxsize=64)
def _uniformized_heat(space: DiscreteDirichletSpace, t: float) -> np.ndarray:
    S = symmetric_generator(space)
    c = float(S.diagonal().max())
    A = c * np.eye(space.n) - S
    A[A < 0] = 0.0  # only roundoff on the diagonal can dip below zero
    size = t * float(np.abs(A).sum(axis=0).max())
    squarings = max(0, math.ceil(math.log2(size)) + 1) if size > 0 else 0
    B = (t / 2 ** squarings) * A
    acc = np.eye(space.n)
    term = np.eye(space.n)
    eps = np.finfo(float).eps
    for j in range(1, 10_000):
        term = term @ B / j
        acc += term
        if np.all(term <= eps * acc):
            break
    acc *= math.exp(-c * t / 2 ** squarings)
    for _ in range(squarings):
        acc = acc @ acc
    acc.setflags(write=False)
    return acc


def _check_sets(space: DiscreteDirichletSpace, V1: VertexSubset, V2: VertexSubset) -> None:
    if not len(V1) or not len(V2):
        raise ValidationError("both vertex sets must be nonempty")
    if np.any(V1.closure & V2.members):
        raise ValidationError("V2 meets the 1-hop closure of V1")


def _check_order(n: int) -> int:
    if int(n) != n or n < 0:
        raise UsageError("derivative order must be a nonnegative integer")
    return int(n)


def masked_block(decomp: SpectralDecomposition, V1: VertexSubset, V2: VertexSubset,
                 n: int, t: float, method: str = "uniformized") -> np.ndarray:
    """Block of (-P)^n H_t from V1 to V2 in m-orthonormal vertex coordinates."""
    space = decomp.space
    n = _check_order(n)
    if not t > 0:
        raise UsageError("t must be positive")
    _check_sets(space, V1, V2)
    i2, i1 = V2.indices, V1.indices
    if method == "spectral":
        W = np.sqrt(space.measure)[:, None] * decomp.vectors
        mult = derivative_multiplier(decomp.eigenvalues, n, t)
        return (W[i2] * mult) @ W[i1].T
    if method != "uniformized":
        raise UsageError(f"unknown method {method!r}")
    E = uniformized_heat(space, t)[:, i1]
    if n:
        mS = -symmetric_generator(space)
        for _ in range(n):
            E = mS @ E
    return E[i2]


def masked_heat_norm(decomp: SpectralDecomposition, V1: VertexSubset, V2: VertexSubset,
                     n: int, t: float, method: str = "uniformized") -> float:
    block = masked_block(decomp, V1, V2, n, t, method)
    return float(np.linalg.svd(block, compute_uv=False)[0])


def top_singular_pair(decomp: SpectralDecomposition, V1: VertexSubset, V2: VertexSubset,
                      n: int, t: float):
    """Unit-norm maximisers (g1, g2) of |<(-P)^n H_t g1, g2>| as full vertex functions."""
    space = decomp.space
    block = masked_block(decomp, V1, V2, n, t)
    U, s, Vt = np.linalg.svd(block)
    g1 = np.zeros(space.n)
    g2 = np.zeros(space.n)
    g1[V1.indices] = Vt[0] / np.sqrt(space.measure[V1.indices])
    g2[V2.indices] = U[:, 0] / np.sqrt(space.measure[V2.indices])
    return g1, g2, float(s[0])


def brute_force_masked(decomp: SpectralDecomposition, V1: VertexSubset, V2: VertexSubset,
                       n: int, t: float, n_samples: int = 100_000, rng=None,
                       method: str = "uniformized") -> float:
    """Sampled sup over unit g1 on V1; the g2 side is maximised by Cauchy-Schwarz.

    The sampled pairs live in vertex coordinates with m-weights, so no
    singular value decomposition is involved.
    """
    space = decomp.space
    block = masked_block(decomp, V1, V2, n, t, method)
    rng = np.random.default_rng(rng)
    i1, i2 = V1.indices, V2.indices
    r1, r2 = np.sqrt(space.measure[i1]), np.sqrt(space.measure[i2])
    # kernel of (-P)^n H_t between the two sets, acting on nodal values
    kernel = block / r2[:, None] * r1[None, :]
    m1, m2 = space.measure[i1], space.measure[i2]
    best = 0.0
    for start in range(0, n_samples, 20_000):
        g = rng.normal(size=(min(20_000, n_samples - start), i1.size))
        g /= np.sqrt(g ** 2 @ m1)[:, None]
        out = g @ kernel.T
        best = max(best, float(np.sqrt(out ** 2 @ m2).max()))
    return best


@dataclass
class MaskedHeatReport:
    V1: VertexSubset
    V2: VertexSubset
    t_grid: np.ndarray
    values: dict  # (n, t) -> G(n, t)
    hop_distance: int
    intrinsic_distance: float | None = None


def masked_heat_table(decomp: SpectralDecomposition, V1: VertexSubset, V2: VertexSubset,
                      n_max: int, t_grid, with_intrinsic: bool = False) -> MaskedHeatReport:
    space = decomp.space
    t_grid = np.asarray(t_grid, float)
    vals = {(n, float(t)): masked_heat_norm(decomp, V1, V2, n, t)
            for n in range(n_max + 1) for t in t_grid}
    hop = hop_distance(space, V1, V2)
    d = intrinsic_distance(space, V1, V2) if with_intrinsic else None
    return MaskedHeatReport(V1, V2, t_grid, vals, hop, d)


def hop_distance(space: DiscreteDirichletSpace, V1: VertexSubset, V2: VertexSubset) -> int:
    d = space.hop_distances(V1.members)[V2.members].min()
    return int(d) if np.isfinite(d) else -1


def small_t_exponent(ts, values) -> float:
    """Least-squares slope of log G against log t."""
    ts, values = np.asarray(ts, float), np.asarray(values, float)
    keep = values > 0
    if keep.sum() < 2:
        return math.nan
    return float(np.polyfit(np.log(ts[keep]), np.log(values[keep]), 1)[0])


# --- the weak Gaussian assumption ------------------------------------------------

def assumption_check(decomp: SpectralDecomposition, V1: VertexSubset, V2: VertexSubset,
                     a_list, n_max: int, t_grid, fit_points: int = 4) -> reports.Report:
    """Tabulate t^-a G(n, t) as t decreases along the grid.

    Each (a, n) passes when the value at the smallest t is at most 1e-3 of the
    value at the largest t, and the last four values decrease.  On a fixed graph
    G(n, t) behaves like t^(d - n) with d the hop distance.  So for a >= d - n
    the limit cannot vanish.  Those failures are reported as XFAIL because they
    come from the mesh and not from the check.
    """
    a_list = [float(a) for a in a_list]
    if any(a < 0 for a in a_list):
        raise UsageError("a must be nonnegative")
    ts = np.sort(np.asarray(t_grid, float))[::-1]
    space = decomp.space
    hop = hop_distance(space, V1, V2)
    rep = reports.Report("assumption_check")
    G = {n: np.array([masked_heat_norm(decomp, V1, V2, n, t) for t in ts])
         for n in range(n_max + 1)}
    exponents = {}
    for n in range(n_max + 1):
        exponents[n] = small_t_exponent(ts[-fit_points:], G[n][-fit_points:])
        for a in a_list:
            scaled = ts ** (-a) * G[n]
            first, last = scaled[0], scaled[-1]
            tail = scaled[-fit_points:]
            monotone = bool(np.all(np.diff(tail) < 0)) or bool(np.all(tail == 0))
            ok = last <= 1e-3 * first and monotone
            feasible = a < hop - n
            verdict = reports.PASS if ok else (reports.FAIL if feasible else reports.XFAIL)
            rep.add(reports.Row(f"a={a:g},n={n}", float(last), float(1e-3 * first),
                                float(1e-3 * first - last), verdict,
                                {"a": a, "n": n, "monotone_tail": monotone,
                                 "feasible": feasible, "t": float(ts[-1]),
                                 "series": [float(v) for v in scaled]}))
    rep.summary.update(hop_distance=hop, feasibility_bound={n: hop - n for n in G},
                       fitted_exponent=exponents,
                       validity_ceiling={n: _ceiling(rep, n) for n in G},
                       t_grid=[float(t) for t in ts])
    return rep


def _ceiling(rep: reports.Report, n: int) -> float:
    """Largest a that passed for this n."""
    passed = [r.detail["a"] for r in rep.rows if r.detail["n"] == n and r.verdict == reports.PASS]
    return max(passed, default=math.nan)


# --- Davies perturbation -----------------------------------------------------------

def perturbation_weights(space: DiscreteDirichletSpace, phi, lam: float) -> np.ndarray:
    """Edge weights 2 (cosh(lam dphi) - 1) / lam^2, which tend to dphi^2 as lam -> 0.

    On a graph the rate of |H_t^{lam phi} f|^2 contains
    4 sum_e c u_x u_y (cosh(lam dphi) - 1).  That sum is bounded by
    2 lam^2 int u^2 dGamma_lam(phi), where Gamma_lam uses these weights
    in place of dphi^2.  With plain squares no such bound holds.
    """
    phi = np.asarray(phi, float)
    dphi = phi[space.edges[:, 0]] - phi[space.edges[:, 1]]
    if lam == 0:
        return dphi ** 2
    x = lam * dphi
    # 2 (cosh x - 1) = 4 sinh(x/2)^2 avoids cancellation for small x
    return 4 * np.sinh(0.5 * x) ** 2 / lam ** 2


def perturbation_gamma_mass(space: DiscreteDirichletSpace, phi, lam: float) -> np.ndarray:
    w = 0.5 * space.cond * perturbation_weights(space, phi, lam)
    out = np.zeros(space.n)
    np.add.at(out, space.edges[:, 0], w)
    np.add.at(out, space.edges[:, 1], w)
    return out


def certify_perturbation(space: DiscreteDirichletSpace, phi, lam: float,
                         c1: float) -> CutoffCertificate:
    """Certificate whose c2 controls the exact graph perturbation energy at this lambda.

    The returned c2 is at least the plain minimal c2, and the two agree as
    lam * max|dphi| -> 0.
    """
    base = certify_cutoff(space, phi, c1)
    res = minimal_c2(space, base.values, c1, lhs_diag=perturbation_gamma_mass(space, phi, lam))
    base.flags.update(plain_c2=base.c2, lam=float(lam),
                      kappa=float(lam * np.abs(base.values[space.edges[:, 0]]
                                               - base.values[space.edges[:, 1]]).max()))
    base.c2 = res.c2
    base.method = "eigen_exact_perturbation"
    base.witness = res.witness
    return base


def perturbed_heat(decomp: SpectralDecomposition, phi, lam: float, t: float, f) -> np.ndarray:
    """H_t^{lam phi} f = exp(-lam phi) H_t (exp(lam phi) f)."""
    phi = np.asarray(phi, float)
    return np.exp(-lam * phi) * apply_heat(decomp, t, np.exp(lam * phi) * np.asarray(f, float))


def _perturbed_norm_rate(decomp, phi, lam, t, f) -> float:
    # d/dt |u|^2 with u = e^{-lam phi} w and w = H_t(e^{lam phi} f)
    w = apply_heat(decomp, t, np.exp(lam * phi) * f)
    dw = decomp.apply_function(-decomp.eigenvalues * np.exp(-decomp.eigenvalues * t),
                               np.exp(lam * phi) * f)
    return float(2 * np.sum(decomp.space.measure * np.exp(-2 * lam * phi) * w * dw))


def davies_gronwall_check(decomp: SpectralDecomposition, cert: CutoffCertificate, lam: float,
                          f, t_grid, slack: float = 1e-9) -> reports.Report:
    """Check |H_t^{lam phi} f|^2 <= |f|^2 exp(2 lam^2 C2 t) on a time grid.

    The differential form  d/dt N <= 2 lam^2 C2 N  is also checked at midpoints
    between consecutive grid times.  The exact derivative is used there, and a
    centred difference over the grid spacing is reported as a cross-check.
    """
    if cert.c2 is None:
        raise PreconditionError("certificate is infeasible")
    if lam < 0:
        raise UsageError("lambda must be nonnegative")
    if lam ** 2 * cert.c1 > 1 + 1e-12:
        raise PreconditionError(f"lambda^2 C1 = {lam ** 2 * cert.c1:.6g} exceeds 1")
    space = decomp.space
    phi = cert.values
    f = np.asarray(f, float)
    ts = np.sort(np.asarray(t_grid, float))
    if np.any(ts < 0):
        raise UsageError("times must be nonnegative")
    f2 = norm(space, f) ** 2
    rate = 2 * lam ** 2 * cert.c2
    rep = reports.Report("davies_gronwall")
    N = []
    for t in ts:
        val = norm(space, perturbed_heat(decomp, phi, lam, t, f)) ** 2
        N.append(val)
        rep.add(reports.leq(f"gronwall,t={t:.6g}", val, f2 * float(np.exp(min(rate * t, 700.0))),
                            abs_tol=slack * max(f2, 1e-300), t=float(t), kind="integrated"))
    for (ta, na), (tb, nb) in zip(zip(ts, N), zip(ts[1:], N[1:])):
        mid = 0.5 * (ta + tb)
        nm = norm(space, perturbed_heat(decomp, phi, lam, mid, f)) ** 2
        d_exact = _perturbed_norm_rate(decomp, phi, lam, mid, f)
        d_diff = (nb - na) / (tb - ta)
        rep.add(reports.leq(f"differential,t={mid:.6g}", d_exact, rate * nm,
                            abs_tol=slack * max(f2, 1e-300), t=float(mid), kind="differential",
                            difference_quotient=d_diff, difference_gap=abs(d_diff - d_exact)))
    rep.summary.update(lam=lam, c1=cert.c1, c2=cert.c2, norm_f_squared=f2)
    return rep


# --- Davies, Takeda and derivative bounds -----------------------------------------

def _fit_params(fit):
    if isinstance(fit, PowerFit):
        if not fit.r2 >= R2_THRESHOLD:
            raise PreconditionError(
                f"power-law fit has R^2 = {fit.r2:.4f} < {R2_THRESHOLD}: "
                f"C = {fit.C:.6g}, alpha = {fit.alpha:.4f}, "
                f"c2 over [{fit.c1_grid.min():.3g}, {fit.c1_grid.max():.3g}] = "
                f"{[round(float(v), 6) for v in fit.c2_values]}")
        return float(fit.C), float(fit.alpha), (float(fit.c1_grid.min()),
                                                float(fit.c1_grid.max()))
    C, alpha = (float(v) for v in fit)
    return C, alpha, None


def davies_lambda(C: float, alpha: float, t) -> np.ndarray:
    return (1.0 / (2 * C * np.asarray(t, float))) ** (1.0 / (1 + 2 * alpha))


def davies_bound(C: float, alpha: float, t) -> np.ndarray:
    """exp(-(1/2) (1/(2 C t))^(1/(1+2 alpha)))."""
    return np.exp(-0.5 * davies_lambda(C, alpha, t))


def perturbation_c2(space: DiscreteDirichletSpace, phi, lam: float, c1: float) -> float | None:
    """Minimal c2 for the graph perturbation energy of phi at lam, for any c1 >= 0."""
    return minimal_c2(space, phi, c1, lhs_diag=perturbation_gamma_mass(space, phi, lam)).c2


def realizable_window(C: float, alpha: float, t_grid, c1_domain=None, space=None,
                      phi=None) -> np.ndarray:
    """Mask of grid times at which the proof's choice of lambda is realizable.

    Take lambda(t) = (1/(2 C t))^(1/(1+2 alpha)) and C1(t) = 1/lambda^2.  With a
    cut-off phi, t is realizable when the graph perturbation c2 of phi at
    (lambda, C1) is at most C C1^-alpha, so the Gronwall step holds exactly.
    Without phi the test is membership of C1(t) in ``c1_domain``.
    """
    t = np.asarray(t_grid, float)
    lam = davies_lambda(C, alpha, t)
    c1 = lam ** -2.0
    mask = np.ones(t.size, bool)
    if c1_domain is not None:
        lo, hi = c1_domain
        mask &= (c1 >= lo * (1 - 1e-12)) & (c1 <= hi * (1 + 1e-12))
    if phi is not None:
        jump = float(np.abs(phi[space.edges[:, 0]] - phi[space.edges[:, 1]]).max())
        for i in np.nonzero(mask)[0]:
            if lam[i] * jump > 700:  # cosh overflows long before this is realizable
                mask[i] = False
                continue
            c2 = perturbation_c2(space, phi, lam[i], c1[i])
            mask[i] = c2 is not None and c2 <= C * c1[i] ** -alpha * (1 + 1e-12)
    return mask


def _window_summary(ts, mask) -> dict:
    if not mask.any():
        return {"lower": None, "upper": None}
    return {"lower": float(ts[mask].min()), "upper": float(ts[mask].max())}


def _check_separating(space, V1, V2, phi):
    if phi is None:
        return None
    phi = np.asarray(phi, float)
    if np.any(phi[V1.indices] != 1.0) or np.any(phi[V2.indices] != 0.0):
        raise ValidationError("phi must equal 1 on V1 and 0 on V2")
    if phi.min() < 0 or phi.max() > 1:
        raise UsageError("cut-off values must lie in [0, 1]")
    return phi


def davies_bound_check(decomp: SpectralDecomposition, V1: VertexSubset, V2: VertexSubset,
                       fit, t_grid, phi=None, c1_domain=None) -> reports.Report:
    """Compare G(0, t) with the Davies bound on the realizable window.

    ``fit`` is a PowerFit (refused when R^2 < 0.9) or a pair (C, alpha).  A
    PowerFit brings its c1 grid as the certified domain, and ``c1_domain``
    overrides that.  A separating cut-off ``phi`` (1 on V1, 0 on V2) further
    restricts the window to times where the law is realized by phi.  Grid times
    outside the window are reported as SKIP.
    """
    C, alpha, domain = _fit_params(fit)
    if c1_domain is not None:
        domain = tuple(float(v) for v in c1_domain)
    phi = _check_separating(decomp.space, V1, V2, phi)
    ts = np.sort(np.asarray(t_grid, float))
    mask = realizable_window(C, alpha, ts, domain, decomp.space, phi)
    bound = davies_bound(C, alpha, ts)
    rep = reports.Report("davies_bound")
    for t, b, ok in zip(ts, bound, mask):
        g = masked_heat_norm(decomp, V1, V2, 0, t)
        detail = {"t": float(t), "n": 0, "lambda": float(davies_lambda(C, alpha, t)),
                  "c1": float(davies_lambda(C, alpha, t) ** -2.0)}
        if ok:
            rep.add(reports.leq(f"t={t:.6g}", g, b, rel_tol=1e-12, **detail))
        else:
            rep.add(reports.Row(f"t={t:.6g}", g, float(b), float(b - g), reports.SKIP, detail))
    rep.summary.update(C=C, alpha=alpha, c1_domain=domain, window=_window_summary(ts, mask),
                       realized_by_phi=phi is not None)
    return rep


def takeda_bound(d: float, t) -> np.ndarray:
    return np.exp(-d ** 2 / (4 * np.asarray(t, float)))


def takeda_check(decomp: SpectralDecomposition, V1: VertexSubset, V2: VertexSubset, t_grid,
                 distance: float | None = None) -> reports.Report:
    """G(0, t) against exp(-d^2/4t) with d the intrinsic distance.

    Graphs carry kernels of order t^hops at small t, which eventually beats any
    Gaussian.  Misses below the validity window are expected and marked XFAIL.
    The window is the set of grid times from which the bound holds at every
    larger grid time.
    """
    space = decomp.space
    _check_sets(space, V1, V2)
    d = intrinsic_distance(space, V1, V2) if distance is None else float(distance)
    ts = np.sort(np.asarray(t_grid, float))
    G = np.array([masked_heat_norm(decomp, V1, V2, 0, t) for t in ts])
    B = takeda_bound(d, ts)
    holds = G <= B * (1 + 1e-12)
    lower = None
    for i in range(ts.size - 1, -1, -1):
        if not holds[i]:
            break
        lower = float(ts[i])
    rep = reports.Report("takeda")
    for t, g, b, h in zip(ts, G, B, holds):
        verdict = reports.PASS if h else reports.XFAIL
        rep.add(reports.Row(f"t={t:.6g}", float(g), float(b), float(b - g), verdict,
                            {"t": float(t), "n": 0, "expected_small_t_failure": not h}))
    rep.summary.update(distance=d, window={"lower": lower, "upper": float(ts[-1]) if lower else None})
    return rep


def derivative_prefactor(n: int, t: float) -> float:
    return math.factorial(n) * 2.0 ** n / t ** n


def derivative_bound(C: float, alpha: float, n: int, t) -> np.ndarray:
    gamma = 1.0 / (4 ** (1 + alpha) * C)
    t = np.asarray(t, float)
    return derivative_prefactor(n, 1.0) / t ** n * np.exp(
        -(2 * gamma / (3 * t)) ** (1 / (1 + 2 * alpha)))


def cauchy_derivative(decomp: SpectralDecomposition, f, g, n: int, t: float,
                      radius: float | None = None, nodes: int = 256) -> float:
    """F^(n)(t) for F(z) = <H_z f, g> by the trapezoid rule on a circle around t."""
    n = _check_order(n)
    r = t / 2 if radius is None else float(radius)
    if not r > 0:
        raise UsageError("radius must be positive")
    theta = 2 * np.pi * np.arange(nodes) / nodes
    m = decomp.space.measure
    g = np.asarray(g, float)
    acc = 0.0 + 0.0j
    for th in theta:
        z = t + r * np.exp(1j * th)
        F = np.sum(m * apply_heat_complex(decomp, z, f) * g)
        acc += F * np.exp(-1j * n * th)
    return float((math.factorial(n) / r ** n * acc / nodes).real)


def spectral_derivative(decomp: SpectralDecomposition, f, g, n: int, t: float) -> float:
    out = decomp.apply_function(derivative_multiplier(decomp.eigenvalues, n, t), f)
    return float(np.sum(decomp.space.measure * out * np.asarray(g, float)))


def derivative_bound_check(decomp: SpectralDecomposition, V1: VertexSubset, V2: VertexSubset,
                           n_max: int, fit, t_grid, phi=None, c1_domain=None, nodes: int = 256,
                           match_tol: float = 1e-8) -> reports.Report:
    """Derivative Gaussian bound plus a two-route check of F^(n)(t).

    Route one is the masked norm of (-P)^n H_t.  Route two evaluates F^(n)(t)
    with the Cauchy formula on the circle of radius t/2.  F is built from the
    maximising pair of route one, and the result is compared with the spectral
    derivative of that same F.
    """
    if _check_order(n_max) > MAX_DERIVATIVE:
        raise UsageError(f"n_max must be at most {MAX_DERIVATIVE}")
    C, alpha, domain = _fit_params(fit)
    if c1_domain is not None:
        domain = tuple(float(v) for v in c1_domain)
    phi = _check_separating(decomp.space, V1, V2, phi)
    ts = np.sort(np.asarray(t_grid, float))
    mask = realizable_window(C, alpha, ts, domain, decomp.space, phi)
    rep = reports.Report("derivative_bound")
    for n in range(n_max + 1):
        bounds = derivative_bound(C, alpha, n, ts)
        for t, b, ok in zip(ts, bounds, mask):
            g1, g2, value = top_singular_pair(decomp, V1, V2, n, t)
            detail = {"t": float(t), "n": n}
            if ok:
                rep.add(reports.leq(f"bound,n={n},t={t:.6g}", value, b, rel_tol=1e-12, **detail))
            else:
                rep.add(reports.Row(f"bound,n={n},t={t:.6g}", value, float(b), float(b - value),
                                    reports.SKIP, detail))
            spec = spectral_derivative(decomp, g1, g2, n, t)
            cau = cauchy_derivative(decomp, g1, g2, n, t, nodes=nodes)
            rep.add(reports.close(f"cauchy,n={n},t={t:.6g}", cau, spec, abs_tol=match_tol,
                                  masked_value=value, **detail))
    rep.summary.update(C=C, alpha=alpha, c1_domain=domain, window=_window_summary(ts, mask),
                       gamma=1.0 / (4 ** (1 + alpha) * C))
    return rep


# --- serialization ------------------------------------------------------------------

def report_csv(rep: reports.Report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "n", "value", "bound", "margin", "verdict"])
    for r in rep.rows:
        w.writerow([repr(float(r.detail.get("t", math.nan))), r.detail.get("n", ""),
                    repr(r.lhs), repr(r.rhs), repr(r.margin), r.verdict])
    return buf.getvalue()


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return None if not math.isfinite(x) else float(x)
    if isinstance(x, np.integer):
        return int(x)
    return x


def report_json(rep: reports.Report) -> str:
    doc = {"name": rep.name, "counts": rep.counts(), "summary": _jsonable(rep.summary)}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"
