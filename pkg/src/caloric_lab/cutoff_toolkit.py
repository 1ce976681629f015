"""Cut-off functions with certified energy-inequality constants.

A cut-off eta in [0, 1] is certified for a pair (c1, c2) when, for every v,

    int v^2 dGamma(eta, eta) <= c1 int eta^2 dGamma(v, v) + c2 int_S v^2 dm      (*)

with S the 1-hop closure of {eta != 0}.  Both sides are quadratic forms in v:
the left is the diagonal form D (vertex masses of Gamma(eta, eta)), the first
term on the right is the Laplacian B with edge weights c_xy (eta_x^2 + eta_y^2)/2.
The minimal c2 is therefore the top eigenvalue of the pencil (D - c1 B, M_S),
after checking that D - c1 B is negative semidefinite on the kernel of M_S.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra, shortest_path

from . import reports
from .dirichlet_core import as_vertex_function, gamma_mass
from .errors import NumericError, PreconditionError, UsageError, ValidationError
from .space_builders import DiscreteDirichletSpace, VertexSubset


@dataclass
class CutoffCertificate:
    values: np.ndarray
    inner_set: VertexSubset
    outer_set: VertexSubset
    c1: float
    c2: float | None  # None marks an infeasible pair
    method: str = "eigen_exact"
    witness: np.ndarray | None = None
    flags: dict = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return self.c2 is not None

    def to_json_dict(self) -> dict:
        doc = {"values": [float(v) for v in self.values],
               "inner": [int(i) for i in self.inner_set.indices],
               "outer": [int(i) for i in self.outer_set.indices],
               "c1": self.c1, "c2": self.c2, "method": self.method}
        if self.witness is not None:
            doc["witness"] = [float(v) for v in self.witness]
        return doc


@dataclass
class C2Result:
    """Outcome of a minimal-c2 computation."""

    c2: float | None
    top: float  # largest pencil eigenvalue, may be negative
    witness: np.ndarray
    support: np.ndarray  # boolean mask S


def support_closure(space: DiscreteDirichletSpace, eta: np.ndarray) -> np.ndarray:
    return space.neighbors_closure(np.abs(eta) > 0)


def _check_cutoff_values(eta: np.ndarray) -> None:
    if eta.min() < 0 or eta.max() > 1:
        raise UsageError("cut-off values must lie in [0, 1]")


def weighted_laplacian(space: DiscreteDirichletSpace, weight_edges: np.ndarray) -> sp.csr_matrix:
    i, j = space.edges[:, 0], space.edges[:, 1]
    A = sp.coo_matrix((weight_edges, (i, j)), shape=(space.n, space.n))
    A = (A + A.T).tocsr()
    return (sp.diags(np.asarray(A.sum(axis=1)).ravel()) - A).tocsr()


def cutoff_forms(space: DiscreteDirichletSpace, eta: np.ndarray):
    """Sparse matrices (D, B) with v.D.v = int v^2 dGamma(eta,eta), v.B.v = int eta^2 dGamma(v,v)."""
    D = sp.diags(gamma_mass(space, eta, eta)).tocsr()
    i, j = space.edges[:, 0], space.edges[:, 1]
    B = weighted_laplacian(space, 0.5 * space.cond * (eta[i] ** 2 + eta[j] ** 2))
    return D, B


def cutoff_terms(space: DiscreteDirichletSpace, eta: np.ndarray, v: np.ndarray):
    """The three integrals of (*) for a batch of columns v (n x k) or one vector.

    Evaluated edge by edge, independently of the matrix assembly used by the
    eigen route.
    """
    v = np.asarray(v, float)
    single = v.ndim == 1
    V = v[:, None] if single else v
    S = support_closure(space, eta)
    i, j = space.edges[:, 0], space.edges[:, 1]
    ge = gamma_mass(space, eta, eta)
    lhs = ge @ (V ** 2)
    wts = 0.5 * space.cond * (eta[i] ** 2 + eta[j] ** 2)
    energy_term = wts @ ((V[i] - V[j]) ** 2)
    mass = (space.measure * S) @ (V ** 2)
    if single:
        return float(lhs[0]), float(energy_term[0]), float(mass[0])
    return lhs, energy_term, mass


def cutoff_ratio(space: DiscreteDirichletSpace, eta, c1: float, v) -> np.ndarray | float:
    lhs, en, mass = cutoff_terms(space, np.asarray(eta, float), v)
    return (lhs - c1 * en) / mass


def _top_generalized(Q: np.ndarray, m: np.ndarray):
    """Largest eigenpair of Q x = mu diag(m) x for symmetric Q."""
    r = 1.0 / np.sqrt(m)
    A = Q * r[:, None] * r[None, :]
    A = 0.5 * (A + A.T)
    k = A.shape[0]
    if k == 1:
        return float(A[0, 0]), np.array([r[0]])
    nz = np.nonzero(A)
    bandwidth = int(np.max(np.abs(nz[0] - nz[1]))) if nz[0].size else 0
    if k > 64 and bandwidth <= 8:
        ab = np.zeros((bandwidth + 1, k))
        for d in range(bandwidth + 1):
            ab[bandwidth - d, d:] = np.diagonal(A, d)
        w, x = sla.eig_banded(ab, lower=False, select="i", select_range=(k - 1, k - 1))
    else:
        w, x = sla.eigh(A, subset_by_index=[k - 1, k - 1])
    return float(w[-1]), x[:, -1] * r


def minimal_c2(space: DiscreteDirichletSpace, eta, c1: float, tol: float = 1e-12,
               lhs_diag: np.ndarray | None = None) -> C2Result:
    """Smallest c2 making (*) hold for all v, for any c1 >= 0.

    ``lhs_diag`` replaces the vertex masses of Gamma(eta, eta) on the left side.
    """
    eta = as_vertex_function(space, eta, "eta")
    if c1 < 0:
        raise UsageError("c1 must be nonnegative")
    S = support_closure(space, eta)
    D, B = cutoff_forms(space, eta)
    if lhs_diag is not None:
        D = sp.diags(np.asarray(lhs_diag, float)).tocsr()
    Q = (D - c1 * B).tocsr()
    T = ~S
    scale = max(1.0, abs(Q).max())
    witness = np.zeros(space.n)
    if T.any():
        QTT = Q[T][:, T]
        QST = Q[S][:, T]
        QTT.eliminate_zeros()
        if QTT.nnz:
            lam, vec = np.linalg.eigh(QTT.toarray())
            if lam[-1] > tol * scale:
                witness[T] = vec[:, -1]
                return C2Result(None, math.inf, witness, S)
        if abs(QST).max() > tol * scale if QST.nnz else False:
            # coupled kernel directions: the supremum over v_T is +inf unless the
            # coupling lies in the range of Q_TT; S is a closure, so this branch
            # only triggers for hand-built inputs
            witness[T] = 1.0
            return C2Result(None, math.inf, witness, S)
    QSS = Q[S][:, S].toarray()
    top, x = _top_generalized(QSS, space.measure[S])
    witness[S] = x
    # a nonpositive top is roundoff-level positive when eta is constant on S
    c2 = top if top > 64 * np.finfo(float).eps * scale else 0.0
    return C2Result(c2, top, witness, S)


def certify_cutoff(space: DiscreteDirichletSpace, eta, c1: float,
                   inner: VertexSubset | None = None,
                   outer: VertexSubset | None = None) -> CutoffCertificate:
    """Minimal c2 for eta at the given c1 in (0, 1), with a tightness witness."""
    if not 0 < c1 < 1:
        raise UsageError("c1 must lie in (0, 1)")
    eta = as_vertex_function(space, eta, "eta")
    _check_cutoff_values(eta)
    res = minimal_c2(space, eta, c1)
    inner = inner or VertexSubset.of(space, mask=eta >= 1)
    outer = outer or VertexSubset.of(space, mask=eta > 0)
    flags = {"top_eigenvalue": res.top}
    if res.c2 is not None and np.any(res.witness[res.support]):
        flags["witness_ratio"] = float(cutoff_ratio(space, eta, c1, res.witness))
    return CutoffCertificate(eta.copy(), inner, outer, float(c1), res.c2, "eigen_exact",
                             res.witness, flags)


def _rayleigh_polish(space, eta, c1, v0, iters=500, tol=1e-14):
    """Locally optimal ascent of the ratio in span{v, gradient, previous step}.

    Stationary points other than the top eigenvector are saddles, so the
    ascent started from a good random sample reaches the global maximum.
    Only 3x3 pencils are solved here; the large eigensolver is not used.
    """
    S = support_closure(space, eta)
    D, B = cutoff_forms(space, eta)
    Q = (D - c1 * B)[S][:, S]
    m = space.measure[S]
    x = v0[S].copy()
    x /= np.sqrt(np.dot(m, x * x))
    prev = None
    rho = float(x @ (Q @ x))
    for _ in range(iters):
        g = Q @ x - rho * m * x
        if np.sqrt(np.dot(g, g / m)) < tol * max(1.0, abs(rho)):
            break
        basis = [x, g] + ([prev] if prev is not None else [])
        Z = np.linalg.qr(np.stack(basis, axis=1))[0]
        A = Z.T @ (Q @ Z)
        Mz = Z.T @ (m[:, None] * Z)
        w, y = sla.eigh(0.5 * (A + A.T), 0.5 * (Mz + Mz.T))
        new = Z @ y[:, -1]
        new /= np.sqrt(np.dot(m, new * new))
        prev = new - x * np.dot(m, new * x)
        x = new
        rho_new = float(x @ (Q @ x))
        if abs(rho_new - rho) <= 1e-16 * max(1.0, abs(rho_new)):
            rho = rho_new
            break
        rho = rho_new
    out = np.zeros(space.n)
    out[S] = x
    return out


@dataclass
class SampledSup:
    sample_max: float
    polished_max: float
    witness: np.ndarray


def sampled_sup(space: DiscreteDirichletSpace, eta, c1: float, n_samples: int = 10_000,
                rng: np.random.Generator | None = None, polish: int = 3,
                batch: int = 2000) -> SampledSup:
    """Random-sampling estimate of the minimal c2, optionally polished.

    Raw Gaussian samples bound the supremum from below but cannot resolve it
    to 1e-6 beyond a handful of dimensions, so the best ``polish`` samples are
    refined by a locally optimal ascent on the ratio.
    """
    eta = as_vertex_function(space, eta, "eta")
    rng = rng or np.random.default_rng(0)
    S = support_closure(space, eta)
    best_vals = np.full(0, -np.inf)
    best_vecs = np.zeros((space.n, 0))
    done = 0
    while done < n_samples:
        k = min(batch, n_samples - done)
        V = np.zeros((space.n, k))
        V[S] = rng.standard_normal((int(S.sum()), k))
        r = cutoff_ratio(space, eta, c1, V)
        vals = np.concatenate([best_vals, r])
        vecs = np.concatenate([best_vecs, V], axis=1)
        keep = np.argsort(vals)[::-1][:max(polish, 1)]
        best_vals, best_vecs = vals[keep], vecs[:, keep]
        done += k
    sample_max = float(best_vals[0])
    polished, witness = sample_max, best_vecs[:, 0]
    for col in range(min(polish, best_vecs.shape[1])):
        w = _rayleigh_polish(space, eta, c1, best_vecs[:, col])
        val = float(cutoff_ratio(space, eta, c1, w))
        if val > polished:
            polished, witness = val, w
    return SampledSup(sample_max, polished, witness)


def verify_certificate(space: DiscreteDirichletSpace, cert: CutoffCertificate, vs,
                       rel_tol: float = 1e-10, case: str = "cutoff") -> reports.Report:
    """Check (*) with the certificate's constants on the columns of ``vs``."""
    rep = reports.Report("certificate")
    if not cert.feasible:
        raise PreconditionError("certificate is infeasible")
    lhs, en, mass = cutoff_terms(space, cert.values, np.asarray(vs, float))
    for k in range(np.size(lhs)):
        rhs = cert.c1 * en[k] + cert.c2 * mass[k]
        rep.add(reports.leq(f"{case}[{k}]", lhs[k], rhs, rel_tol=rel_tol, abs_tol=1e-300))
    return rep


def tightness_check(space: DiscreteDirichletSpace, cert: CutoffCertificate,
                    n_samples: int = 10_000, rng=None, gap_tol: float = 1e-6) -> reports.Report:
    """sampled max <= certified c2 <= polished sampled max + gap_tol."""
    rep = reports.Report("tightness")
    top = cert.flags.get("top_eigenvalue", cert.c2)
    smp = sampled_sup(space, cert.values, cert.c1, n_samples, rng)
    scale = max(1.0, abs(top))
    rep.add(reports.leq("sample<=eigen", smp.sample_max, top, abs_tol=1e-12 * scale))
    rep.add(reports.leq("polished<=eigen", smp.polished_max, top, abs_tol=1e-12 * scale))
    rep.add(reports.leq("eigen<=polished+gap", top, smp.polished_max + gap_tol))
    rep.summary.update(sample_max=smp.sample_max, polished_max=smp.polished_max, eigen=top)
    return rep


# --- gradient inequality ------------------------------------------------------

def gradient_inequality_check(space: DiscreteDirichletSpace, cert: CutoffCertificate, v,
                              rel_tol: float = 1e-10) -> reports.Report:
    """Sharp and simplified gradient inequalities for a certified cut-off.

    sharp:      int dGamma(eta v, eta v) <= (1-2c1)/(1-4c1) int dGamma(eta^2 v, v)
                                            + c2/(1-4c1) int_S v^2 dm        (c1 < 1/4)
    simplified: int dGamma(eta v, eta v) <= 2 int dGamma(eta^2 v, v) + 2 c2 int_S v^2 dm
                                                                            (c1 < 1/8)
    """
    c1, c2 = cert.c1, cert.c2
    if c1 >= 0.25:
        raise PreconditionError("the gradient inequality needs c1 < 1/4")
    if c2 is None:
        raise PreconditionError("certificate is infeasible")
    eta = cert.values
    v = as_vertex_function(space, v, "v")
    S = support_closure(space, eta)
    lhs = float(np.sum(gamma_mass(space, eta * v, eta * v)))
    mixed = float(np.sum(gamma_mass(space, eta * eta * v, v)))
    mass = float(np.sum(space.measure[S] * v[S] ** 2))
    rep = reports.Report("gradient_inequality")
    sharp = (1 - 2 * c1) / (1 - 4 * c1) * mixed + c2 / (1 - 4 * c1) * mass
    scale = dict(rel_tol=rel_tol, abs_tol=rel_tol * (abs(mixed) + c2 * mass))
    rep.add(reports.leq("sharp", lhs, sharp, **scale))
    if c1 < 0.125:
        rep.add(reports.leq("simplified", lhs, 2 * mixed + 2 * c2 * mass, **scale))
    else:
        rep.add(reports.Row("simplified", lhs, math.nan, math.nan, reports.SKIP,
                            {"reason": "c1 >= 1/8"}))
    return rep


def gradient_inequality_worst(space: DiscreteDirichletSpace, cert: CutoffCertificate) -> dict:
    """Exact worst case of both gradient inequalities over all v.

    Each inequality reads v.R.v >= 0 for a symmetric R; the returned values
    are the smallest eigenvalues of R against M_S on S (negative means a
    violating v exists).  Off S both sides vanish.
    """
    c1, c2 = cert.c1, cert.c2
    if c1 >= 0.25 or c2 is None:
        raise PreconditionError("needs a feasible certificate with c1 < 1/4")
    eta = cert.values
    S = support_closure(space, eta)
    L = space.laplacian()
    E = sp.diags(eta)
    lhs = (E @ L @ E).toarray()[np.ix_(S, S)]
    mixed = (sp.diags(eta ** 2) @ L).toarray()
    mixed = 0.5 * (mixed + mixed.T)[np.ix_(S, S)]
    mS = space.measure[S]
    out = {}
    forms = {"sharp": ((1 - 2 * c1) / (1 - 4 * c1), c2 / (1 - 4 * c1))}
    if c1 < 0.125:
        forms["simplified"] = (2.0, 2 * c2)
    for name, (a, b) in forms.items():
        R = a * mixed + b * np.diag(mS) - lhs
        out[name] = float(sla.eigh(R, np.diag(mS), eigvals_only=True)[0])
    return out


# --- sum and product lemmas ---------------------------------------------------

def combine(space: DiscreteDirichletSpace, cert1: CutoffCertificate, cert2: CutoffCertificate,
            mode: str, n_random: int = 100, rng=None, rel_tol: float = 1e-10) -> CutoffCertificate:
    """Sum or product of two cut-offs carrying the lemma constants.

    The two certificates are first brought to common constants (maxima).  The
    lemma inequality is checked on ``n_random`` Gaussian v and exactly through
    the minimal c2 at the lemma's c1; both outcomes are stored in ``flags``.
    A sum is clamped to [0, 1] afterwards and the clamped profile is
    certified on its own.
    """
    if not (cert1.feasible and cert2.feasible):
        raise PreconditionError("both certificates must be feasible")
    c1 = max(cert1.c1, cert2.c1)
    c2 = max(cert1.c2, cert2.c2)
    rng = rng or np.random.default_rng(0)
    if mode == "sum":
        raw = cert1.values + cert2.values
        new_c1, new_c2 = 2 * c1, 4 * c2
    elif mode == "product":
        if c1 >= 0.25:
            raise PreconditionError("the product lemma needs c1 < 1/4")
        raw = cert1.values * cert2.values
        new_c1, new_c2 = 16 * c1, 8 * c2
    else:
        raise UsageError(f"unknown combine mode {mode!r}")
    S = support_closure(space, raw)
    V = np.zeros((space.n, n_random))
    V[S] = rng.standard_normal((int(S.sum()), n_random))
    lhs, en, mass = cutoff_terms(space, raw, V)
    rhs = new_c1 * en + new_c2 * mass
    margins = rhs - lhs
    slack = rel_tol * np.maximum(np.abs(lhs), np.abs(rhs))
    exact = minimal_c2(space, raw, new_c1)
    flags = {
        "mode": mode,
        "lemma_c1": new_c1, "lemma_c2": new_c2,
        "random_min_margin": float(margins.min()),
        "random_ok": bool(np.all(margins >= -slack)),
        "exact_minimal_c2": exact.c2,
        "exact_ok": exact.c2 is not None and exact.c2 <= new_c2 * (1 + rel_tol),
        "clamped": False,
    }
    values = raw
    if mode == "sum" and raw.max() > 1:
        values = np.clip(raw, 0.0, 1.0)
        flags["clamped"] = True
        re = minimal_c2(space, values, new_c1)
        flags["clamped_minimal_c2"] = re.c2
    inner = VertexSubset.of(space, mask=values >= 1)
    outer = VertexSubset.of(space, mask=values > 0)
    return CutoffCertificate(values, inner, outer, new_c1, new_c2, "lemma", None, flags)


def lemma_check(space: DiscreteDirichletSpace, combined: CutoffCertificate) -> reports.Report:
    rep = reports.Report("combine")
    f = combined.flags
    rep.add(reports.leq(f"{f['mode']}_random_min_margin", 0.0, f["random_min_margin"]))
    exact = f["exact_minimal_c2"]
    rep.add(reports.leq(f"{f['mode']}_exact", math.inf if exact is None else exact,
                        f["lemma_c2"], rel_tol=1e-10))
    return rep


# --- intrinsic distance -------------------------------------------------------

def adapted_edge_lengths(space: DiscreteDirichletSpace) -> np.ndarray:
    """Edge lengths making every 1-Lipschitz function satisfy Gamma(f, f) <= 1.

    With l_xy = min(sqrt(2 m_x / deg_x), sqrt(2 m_y / deg_y)) one has
    (1/2m_x) sum_y c_xy l_xy^2 <= 1 at every vertex.
    """
    deg = space.degree()
    loc = np.sqrt(2 * space.measure / deg)
    i, j = space.edges[:, 0], space.edges[:, 1]
    return np.minimum(loc[i], loc[j])


def adapted_distance(space: DiscreteDirichletSpace, source) -> np.ndarray:
    """Path metric of the adapted edge lengths, measured from a vertex set."""
    mask = source.members if isinstance(source, VertexSubset) else np.asarray(source, bool)
    ell = adapted_edge_lengths(space)
    i, j = space.edges[:, 0], space.edges[:, 1]
    G = sp.coo_matrix((ell, (i, j)), shape=(space.n, space.n)).tocsr()
    d = dijkstra(G, directed=False, indices=np.flatnonzero(mask))
    return np.atleast_2d(d).min(axis=0)


def _soc_rows(space: DiscreteDirichletSpace):
    """Sparse operator whose reshaped output holds sqrt(c)(phi_x - phi_y) per vertex slot."""
    x = np.concatenate([space.edges[:, 0], space.edges[:, 1]])
    y = np.concatenate([space.edges[:, 1], space.edges[:, 0]])
    c = np.concatenate([space.cond, space.cond])
    order = np.lexsort((y, x))
    x, y, c = x[order], y[order], c[order]
    counts = np.bincount(x, minlength=space.n)
    width = int(counts.max())
    slot = np.arange(x.size) - np.repeat(np.cumsum(counts) - counts, counts)
    row = x * width + slot  # column-major layout: one cone per vertex column
    w = np.sqrt(c)
    H = sp.coo_matrix((np.concatenate([w, -w]), (np.concatenate([row, row]),
                                                 np.concatenate([x, y]))),
                      shape=(width * space.n, space.n)).tocsr()
    return H, width


def intrinsic_distance_profile(space: DiscreteDirichletSpace, source: VertexSubset,
                               target: VertexSubset, tol: float = 1e-9):
    """Optimal value and maximiser of the intrinsic distance program.

    maximise  min_target phi - max_source phi  subject to  Gamma(phi, phi)(x) <= 1,
    written as one second-order cone per vertex and solved by an interior point
    method.
    """
    import cvxpy as cp

    if not len(source) or not len(target):
        raise UsageError("source and target must be nonempty")
    if np.any(source.members & target.members):
        raise UsageError("source and target must be disjoint")
    H, width = _soc_rows(space)
    phi = cp.Variable(space.n)
    s = cp.Variable()
    cones = cp.reshape(H @ phi, (width, space.n), order="F")
    cons = [cp.SOC(np.sqrt(2 * space.measure), cones, axis=0),
            phi[source.indices] <= 0, phi[target.indices] >= s]
    prob = cp.Problem(cp.Maximize(s), cons)
    lower = float(np.min(adapted_distance(space, source)[target.members]))
    try:
        prob.solve(solver=cp.CLARABEL, tol_gap_abs=tol, tol_gap_rel=tol, tol_feas=tol)
    except cp.error.SolverError as exc:
        raise NumericError(f"distance solve failed: {exc}", payload=lower) from exc
    if prob.status not in ("optimal",) or s.value is None:
        raise NumericError(f"distance solve ended with status {prob.status}", payload=lower)
    value = float(s.value)
    return max(value, lower), np.asarray(phi.value, float)


def intrinsic_distance(space: DiscreteDirichletSpace, source: VertexSubset,
                       target: VertexSubset) -> float:
    return intrinsic_distance_profile(space, source, target)[0]


# --- synthesis ----------------------------------------------------------------

def synth_distance_cutoff(space: DiscreteDirichletSpace, V: VertexSubset, U: VertexSubset,
                          c1: float = 1e-6, rho: float | None = None,
                          compute_rho: bool = True) -> CutoffCertificate:
    """Distance-profile cut-off  ((D/sqrt2 - d(x, V))_+ / (D/sqrt2)) clamped to [0, 1].

    d is the adapted path metric, a lower bound of the intrinsic distance for
    which every 1-Lipschitz profile has Gamma <= 1; hence Gamma(eta, eta) <= 2/D^2
    with D = d(V, U^c).  The intrinsic distance rho >= D is reported alongside,
    and eps_h = (rho/D)^2 - 1 is the recorded mesh slack.
    """
    if np.any(V.members & ~U.members):
        raise ValidationError("V must be contained in U")
    Uc = ~U.members
    if not Uc.any():
        raise ValidationError("U must have a nonempty complement")
    if np.any(V.closure & Uc):
        raise ValidationError("V is adjacent to the complement of U: no room for a cut-off")
    d = adapted_distance(space, V)
    D = float(d[Uc].min())
    half = D / math.sqrt(2.0)
    eta = np.clip((half - d) / half, 0.0, 1.0)
    eta[V.members] = 1.0
    cert = certify_cutoff(space, eta, c1, inner=V, outer=U)
    gmax = float(gamma_mass(space, eta, eta).__truediv__(space.measure).max())
    if rho is None and compute_rho:
        rho = intrinsic_distance(space, V, VertexSubset.of(space, mask=Uc))
    cert.flags.update(adapted_distance=D, gamma_max=gmax, gradient_bound=2 / D ** 2)
    if rho is not None:
        eps_h = (rho / D) ** 2 - 1.0
        cert.flags.update(rho=rho, eps_h=eps_h,
                          bounded_gradient=gmax <= (2 / rho ** 2) * (1 + eps_h) * (1 + 1e-12))
    return cert


def ramp_profile(space: DiscreteDirichletSpace, W: VertexSubset, width: int) -> np.ndarray:
    """1 on W, decreasing linearly in hop distance, 0 from distance ``width`` on."""
    d = space.hop_distances(W.members)
    return np.clip(1.0 - d / width, 0.0, 1.0)


@dataclass
class Exhaustion:
    sets: list
    cutoffs: list
    c1: float
    c: float
    widths: list
    compact: bool = False


def build_exhaustion(space: DiscreteDirichletSpace, V: VertexSubset, c1: float, c: float,
                     max_sets: int | None = None, max_width: int | None = None) -> Exhaustion:
    """Nested W_1 = V c W_2 c ... c X with ring cut-offs certified at (c1, c2 <= c).

    Each step picks the smallest ring width w whose ramp profile certifies
    below c and sets W_{i+1} = {hop distance <= w}.  ``max_sets`` stops the
    growth early; the final set is then X itself, reached by phi = 1, which is
    certified with c2 = 0.  The same closing step is taken when no ring short
    of X certifies.  If V already is X, or the first step has to swallow X,
    the trivial exhaustion W_1 = X, phi_1 = 1 is returned.
    """
    if not 0 < c1 < 1:
        raise UsageError("c1 must lie in (0, 1)")
    if not c > 0:
        raise UsageError("c must be positive")
    full = VertexSubset.of(space, mask=np.ones(space.n, bool))
    ones = np.ones(space.n)
    trivial = Exhaustion([full], [certify_cutoff(space, ones, c1, full, full)], c1, c, [0], True)
    if len(V) == space.n:
        return trivial
    sets, cuts, widths = [V], [], []
    W = V
    while True:
        d = space.hop_distances(W.members)
        reach = int(np.max(d))
        limit = reach if max_width is None else min(reach, max_width)
        best = None
        for w in range(1, limit + 1):
            eta = ramp_profile(space, W, w)
            cert = certify_cutoff(space, eta, c1, inner=W,
                                  outer=VertexSubset.of(space, mask=d <= w))
            if best is None or (cert.c2 is not None and cert.c2 < best.c2):
                best = cert
            if cert.c2 is not None and cert.c2 <= c:
                break
        else:
            if limit < reach:
                raise NumericError(f"c2 <= {c} unreachable; best achieved {best.c2}",
                                   payload=best)
            w = reach  # only X itself is left
        nxt = VertexSubset.of(space, mask=d <= w)
        if len(nxt) == space.n:
            if len(sets) == 1:
                return trivial
            cuts.append(certify_cutoff(space, ones, c1, W, full))
            sets.append(full)
            widths.append(0)
            break
        cuts.append(cert)
        sets.append(nxt)
        widths.append(w)
        W = nxt
        if max_sets is not None and len(sets) >= max_sets:
            cuts.append(certify_cutoff(space, ones, c1, W, full))
            sets.append(full)
            widths.append(0)
            break
    return Exhaustion(sets, cuts, c1, c, widths, False)


# --- partition-of-unity quotient and bowl ------------------------------------

def _ball_ramp(space, center_dists: np.ndarray, w: int) -> np.ndarray:
    return np.clip(1.0 - center_dists / w, 0.0, 1.0)


def annuli_cutoff(space: DiscreteDirichletSpace, V: VertexSubset, U: VertexSubset, c1: float,
                  mode: str = "quotient") -> CutoffCertificate:
    """Cut-off for V inside U assembled from small ball cut-offs.

    quotient: eta = sum of ball ramps centred in V' = {d_V <= a}, phi = eta plus
    ball ramps centred outside V; psi = eta / phi, extended by 0.
    bowl: Phi = 1 on an annulus around V, 0 on an inner core and outside U,
    built as the difference of two nested ramp cut-offs.
    Hop distances d_V from V drive both constructions; the gap is
    g = min over U^c of d_V and must be at least 2 (3 for the bowl).
    """
    if np.any(V.members & ~U.members):
        raise ValidationError("V must be contained in U")
    if not (~U.members).any():
        raise ValidationError("U must have a nonempty complement")
    dV = space.hop_distances(V.members)
    gap = int(np.min(dV[~U.members]))
    if mode == "quotient":
        if gap < 2:
            raise ValidationError(f"gap between V and U^c is {gap} rings, need at least 2")
        w = max(1, gap // 2)
        a = gap - w
        adj = space.conductance_matrix()
        adj.data[:] = 1.0
        inner_centres = np.flatnonzero(dV <= a)
        outer_centres = np.flatnonzero((dV >= w) & (dV <= gap + w))
        eta = np.zeros(space.n)
        phi = np.zeros(space.n)
        if inner_centres.size:
            dist = shortest_path(adj, unweighted=True, indices=inner_centres)
            eta = _ball_ramp(space, dist, w).sum(axis=0)
        if outer_centres.size:
            dist = shortest_path(adj, unweighted=True, indices=outer_centres)
            phi = _ball_ramp(space, dist, w).sum(axis=0)
        phi = phi + eta
        psi = np.zeros(space.n)
        pos = eta > 0
        psi[pos] = eta[pos] / phi[pos]
        psi[V.members] = 1.0
        psi[~U.members] = 0.0
        cert = certify_cutoff(space, np.clip(psi, 0, 1), c1, inner=V, outer=U)
        cert.flags.update(mode="quotient", gap=gap, ball_width=w, inner_radius=a,
                          pieces=(int(inner_centres.size), int(outer_centres.size)))
        return cert
    if mode == "bowl":
        if gap < 3:
            raise ValidationError(f"gap between V and U^c is {gap} rings, need at least 3 for a bowl")
        r0 = max(1, round(gap / 6))
        r1 = max(r0 + 1, round(gap / 3))
        r2 = max(r1, round(2 * gap / 3))
        r3 = gap
        if r2 >= r3:
            r2 = r3 - 1
        up = np.clip((dV - r0) / (r1 - r0), 0.0, 1.0)
        down = np.clip((r3 - dV) / (r3 - r2), 0.0, 1.0)
        bowl = np.minimum(up, down)
        inner = VertexSubset.of(space, mask=bowl >= 1)
        outer = VertexSubset.of(space, mask=bowl > 0)
        cert = certify_cutoff(space, bowl, c1, inner=inner, outer=outer)
        cert.flags.update(mode="bowl", gap=gap, radii=(r0, r1, r2, r3),
                          core=VertexSubset.of(space, mask=dV <= r0))
        return cert
    raise UsageError(f"unknown annuli mode {mode!r}")


# --- power-law fit of c2(c1) ----------------------------------------------------

@dataclass
class PowerFit:
    C: float
    alpha: float
    r2: float
    c1_grid: np.ndarray
    c2_values: np.ndarray


def fit_c2_power_law(space: DiscreteDirichletSpace, eta, c1_grid) -> PowerFit:
    """Least-squares fit of log c2 = log C - alpha log c1 over a c1 grid.

    When c2 does not vary over the grid (bounded-gradient cut-offs), the fit
    is exact with alpha = 0 and R^2 is reported as 1.
    """
    c1_grid = np.asarray(c1_grid, float)
    vals = []
    for c1 in c1_grid:
        res = minimal_c2(space, eta, c1)
        if res.c2 is None:
            raise NumericError(f"infeasible at c1={c1}")
        vals.append(res.c2)
    vals = np.array(vals)
    if np.any(vals <= 0):
        return PowerFit(0.0, 0.0, 1.0, c1_grid, vals)
    x, y = np.log(c1_grid), np.log(vals)
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(resid ** 2))
    r2 = 1.0 if ss_tot <= 1e-20 * max(1.0, float(np.sum(y ** 2))) else 1.0 - ss_res / ss_tot
    alpha = max(0.0, -float(slope))
    C = float(np.exp(icpt)) if slope <= 0 else float(vals.max())
    # the fitted law must dominate the data it came from
    C = max(C, float(np.max(vals * c1_grid ** alpha)))
    return PowerFit(C, alpha, r2, c1_grid, vals)
