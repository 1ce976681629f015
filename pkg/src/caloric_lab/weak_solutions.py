"""Space-time fields and the weak form of the heat equation on a vertex region.

For a test function phi(t, x) = w(t) psi(x) the weak residual of (u, f) is

    -int u d_t phi dm dt + int E(u, phi) dt - int <f, phi> dt
  =  int [ -w'(t) <u, psi> + w(t) E(u(t), psi) - w(t) <f(t), psi> ] dt,

evaluated with composite Simpson in time and exact vertex sums in space.
Fields are stored as derivative providers ``fn(t, k)`` returning d^k/dt^k of
the field at the times t (shape (len(t), n)), zero outside the field's domain.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy.integrate import simpson

from .errors import PreconditionError, UsageError, ValidationError
from .space_builders import DiscreteDirichletSpace, VertexSubset
from .spectral_semigroup import SpectralDecomposition

Provider = Callable[[np.ndarray, int], np.ndarray]


@dataclass(frozen=True)
class TimeGrid:
    a: float
    b: float
    n_nodes: int

    def __post_init__(self):
        if not self.a < self.b:
            raise UsageError("time grid needs a < b")
        if self.n_nodes < 9:
            raise UsageError("time grid needs at least 9 nodes")
        if self.n_nodes % 2 == 0:
            raise UsageError("Simpson quadrature needs an odd node count")

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.a, self.b, self.n_nodes)

    @property
    def dt(self) -> float:
        return (self.b - self.a) / (self.n_nodes - 1)

    def node(self, index: int) -> float:
        return float(self.nodes[index])


@dataclass(frozen=True)
class SpaceTimeField:
    grid: TimeGrid
    provider: Provider
    domain: np.ndarray  # boolean vertex mask where the field is defined
    n_max: int | None = None  # None: derivatives of every order
    tag: str = "analytic"
    metadata: dict = field(default_factory=dict, compare=False)

    @property
    def n(self) -> int:
        return self.domain.size

    def at(self, t, k: int = 0) -> np.ndarray:
        if self.n_max is not None and k > self.n_max:
            raise UsageError(f"field has derivatives up to order {self.n_max}, asked for {k}")
        t = np.atleast_1d(np.asarray(t, float))
        out = np.asarray(self.provider(t, k), float)
        return np.where(self.domain[None, :], out, 0.0)

    def values(self, k: int = 0) -> np.ndarray:
        return self.at(self.grid.nodes, k)

    def derivative(self, k: int) -> "SpaceTimeField":
        if k == 0:
            return self
        if self.n_max is not None and k > self.n_max:
            raise UsageError(f"field has derivatives up to order {self.n_max}, asked for {k}")
        base = self.provider
        n_max = None if self.n_max is None else self.n_max - k
        return SpaceTimeField(self.grid, lambda t, j: base(t, j + k), self.domain, n_max,
                              self.tag, dict(self.metadata, derivative=k))

    def __add__(self, other: "SpaceTimeField") -> "SpaceTimeField":
        p, q = self.provider, other.provider
        n_max = _min_order(self.n_max, other.n_max)
        tag = "analytic" if self.tag == other.tag == "analytic" else "sampled"
        return SpaceTimeField(self.grid, lambda t, k: p(t, k) + q(t, k),
                              self.domain & other.domain, n_max, tag)

    def scale(self, c: float) -> "SpaceTimeField":
        p = self.provider
        return SpaceTimeField(self.grid, lambda t, k: c * p(t, k), self.domain, self.n_max,
                              self.tag, dict(self.metadata))


def _min_order(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return min(a, b)


def zero_field(space: DiscreteDirichletSpace, grid: TimeGrid, domain=None) -> SpaceTimeField:
    dom = np.ones(space.n, bool) if domain is None else np.asarray(domain, bool)
    return SpaceTimeField(grid, lambda t, k: np.zeros((np.size(t), space.n)), dom)


def constant_forcing(space: DiscreteDirichletSpace, grid: TimeGrid, value: float) -> SpaceTimeField:
    def fn(t, k):
        return np.full((np.size(t), space.n), value if k == 0 else 0.0)
    return SpaceTimeField(grid, fn, np.ones(space.n, bool))


def sampled_field(grid: TimeGrid, values: np.ndarray, domain=None) -> SpaceTimeField:
    """Field known only at the grid nodes; derivatives come from differencing."""
    values = np.asarray(values, float)
    if values.shape[0] != grid.n_nodes:
        raise UsageError("sampled values need one row per time node")
    if not np.all(np.isfinite(values)):
        raise ValidationError("sampled field has non-finite values")
    dom = np.ones(values.shape[1], bool) if domain is None else np.asarray(domain, bool)
    nodes = grid.nodes

    def fn(t, k):
        d = _difference(values, grid.dt, k)
        idx = np.rint((t - grid.a) / grid.dt).astype(int)
        if np.any(np.abs(nodes[np.clip(idx, 0, grid.n_nodes - 1)] - t) > 1e-9 * grid.dt) \
                or idx.min() < 0 or idx.max() >= grid.n_nodes:
            raise UsageError("sampled fields are only defined at grid nodes")
        return d[idx]

    return SpaceTimeField(grid, fn, dom, None, "sampled")


def _difference(values: np.ndarray, dt: float, k: int) -> np.ndarray:
    out = values
    for _ in range(k):
        out = np.gradient(out, dt, axis=0, edge_order=2)
    return out


def perturb(u: SpaceTimeField, vertex: int, amount: float, time_index: int | None = None) -> SpaceTimeField:
    """Add ``amount`` to one vertex value, at every node or at one time node.

    The result is a sampled field.
    """
    vals = u.values().copy()
    if time_index is None:
        vals[:, vertex] += amount
    else:
        vals[time_index, vertex] += amount
    return sampled_field(u.grid, vals, u.domain)


# --- test functions -------------------------------------------------------------

@dataclass(frozen=True)
class TemporalBump:
    """w(t) = (1 - s^2)^4 with s mapping [t0, t1] onto [-1, 1]; zero outside."""

    t0: float
    t1: float

    def __call__(self, t, k: int = 0) -> np.ndarray:
        t = np.asarray(t, float)
        half = 0.5 * (self.t1 - self.t0)
        s = (t - 0.5 * (self.t0 + self.t1)) / half
        coeffs = npoly.polypow([1.0, 0.0, -1.0], 4)
        dk = npoly.polyder(coeffs, k) if k else coeffs
        vals = npoly.polyval(s, dk) / half ** k
        return np.where(np.abs(s) <= 1.0, vals, 0.0)


@dataclass(frozen=True)
class TestFunction:
    psi: np.ndarray
    w: TemporalBump
    ident: str = ""


def _check_test_function(space: DiscreteDirichletSpace, grid: TimeGrid, phi: TestFunction,
                         domain: np.ndarray) -> None:
    if not (grid.a < phi.w.t0 < phi.w.t1 < grid.b):
        raise PreconditionError(f"temporal support of {phi.ident or 'phi'} not strictly inside I")
    support = np.abs(phi.psi) > 0
    if np.any(space.neighbors_closure(support) & ~domain):
        raise PreconditionError(f"spatial support of {phi.ident or 'phi'} lacks a 1-hop margin "
                                "inside the field's domain")


def _integrand(space: DiscreteDirichletSpace, u: SpaceTimeField, f: SpaceTimeField,
               phi: TestFunction, t: np.ndarray) -> np.ndarray:
    mpsi = space.measure * phi.psi
    kpsi = space.stiffness() @ phi.psi
    U = u.at(t)
    F = f.at(t)
    return -phi.w(t, 1) * (U @ mpsi) + phi.w(t) * (U @ kpsi) - phi.w(t) * (F @ mpsi)


def weak_residual(space: DiscreteDirichletSpace, u: SpaceTimeField, f: SpaceTimeField,
                  phi: TestFunction, return_error: bool = False):
    """lhs - rhs of the weak formulation for one test function.

    With ``return_error`` the Richardson estimate |S_h - S_2h| / 15 of the
    Simpson error is returned as well (nan when the grid cannot be halved).
    """
    if u.grid != f.grid:
        raise UsageError("u and f live on different time grids")
    _check_test_function(space, u.grid, phi, u.domain)
    t = u.grid.nodes
    g = _integrand(space, u, f, phi, t)
    value = float(simpson(g, x=t))
    if not return_error:
        return value
    if (u.grid.n_nodes - 1) % 4 == 0:
        coarse = float(simpson(g[::2], x=t[::2]))
        err = abs(value - coarse) / 15.0
    else:
        err = math.nan
    return value, err


@dataclass
class ResidualNorm:
    value: float
    argmax: str
    per_function: dict


def residual_norm(space: DiscreteDirichletSpace, u: SpaceTimeField, f: SpaceTimeField,
                  basis: Sequence[TestFunction]) -> ResidualNorm:
    """max |weak_residual| over a basis, with the maximising test function."""
    if not basis:
        raise UsageError("basis is empty")
    if u.grid != f.grid:
        raise UsageError("u and f live on different time grids")
    t = u.grid.nodes
    U, F = u.at(t), f.at(t)
    K = space.stiffness()
    per = {}
    # group by temporal profile so the spatial sums are one matrix product
    for w in {phi.w for phi in basis}:
        group = [phi for phi in basis if phi.w == w]
        for phi in group:
            _check_test_function(space, u.grid, phi, u.domain)
        Psi = np.stack([phi.psi for phi in group], axis=1)
        mPsi = space.measure[:, None] * Psi
        g = (-w(t, 1)[:, None] * (U @ mPsi) + w(t)[:, None] * (U @ (K @ Psi))
             - w(t)[:, None] * (F @ mPsi))
        vals = simpson(g, x=t, axis=0)
        for phi, v in zip(group, vals):
            per[phi.ident] = float(v)
    arg = max(per, key=lambda k: abs(per[k]))
    return ResidualNorm(abs(per[arg]), arg, per)


def interior_vertices(space: DiscreteDirichletSpace, domain: np.ndarray) -> np.ndarray:
    """Vertices whose 1-hop closure stays inside the domain."""
    domain = np.asarray(domain, bool)
    outside = space.neighbors_closure(~domain)
    return np.flatnonzero(domain & ~outside)


def temporal_profiles(grid: TimeGrid, count: int = 3) -> list[TemporalBump]:
    """A centred bump and shifted variants, endpoints on Simpson panel boundaries.

    Endpoints fall on node indices divisible by 4 where the grid allows, so
    the coarse Simpson rule used for error estimates is aligned as well.
    """
    n = grid.n_nodes - 1
    step = 4 if n % 4 == 0 and n >= 32 else 2

    def snap(frac):
        return int(round(frac * n / step)) * step

    spans = [(1 / 8, 7 / 8), (1 / 8, 5 / 8), (3 / 8, 7 / 8)][:count]
    out = []
    for lo, hi in spans:
        i0, i1 = max(snap(lo), step), min(snap(hi), n - step)
        if i1 <= i0:
            raise UsageError("time grid too coarse for the temporal profiles")
        out.append(TemporalBump(grid.node(i0), grid.node(i1)))
    return out


def interior_basis(space: DiscreteDirichletSpace, domain, grid: TimeGrid,
                   profiles: int = 3) -> list[TestFunction]:
    """Unit vertex indicators at every interior vertex times each temporal profile."""
    domain = np.ones(space.n, bool) if domain is None else np.asarray(domain, bool)
    verts = interior_vertices(space, domain)
    basis = []
    for j, w in enumerate(temporal_profiles(grid, profiles)):
        for x in verts:
            psi = np.zeros(space.n)
            psi[x] = 1.0
            basis.append(TestFunction(psi, w, f"x{x}:w{j}"))
    return basis


# --- generators ---------------------------------------------------------------------

def generate_global_solution(decomp: SpectralDecomposition, u0, grid: TimeGrid) -> SpaceTimeField:
    """u(t) = H_t u0 with d^k/dt^k u = (-P)^k H_t u0."""
    if grid.a < 0:
        raise UsageError("global flows are generated for t >= 0")
    u0 = np.asarray(u0, float)
    coef = decomp.coefficients(u0)
    lam = decomp.eigenvalues
    vecs = decomp.vectors

    def fn(t, k):
        t = np.atleast_1d(t)
        modal = (-lam)[None, :] ** k * np.exp(-np.outer(t, lam)) * coef[None, :]
        return modal @ vecs.T

    return SpaceTimeField(grid, fn, np.ones(decomp.space.n, bool), None, "analytic",
                          {"kind": "global"})


@dataclass(frozen=True)
class BoundaryProfile:
    """g(t) = sum_p poly[p] t^p + sum (amp, freq, phase): amp sin(freq t + phase)."""

    poly: tuple = (0.0,)
    trig: tuple = ()

    def __call__(self, t, k: int = 0) -> np.ndarray:
        t = np.asarray(t, float)
        c = np.asarray(self.poly, float)
        out = npoly.polyval(t, npoly.polyder(c, k) if k else c)
        for amp, freq, phase in self.trig:
            out = out + amp * freq ** k * np.sin(freq * t + phase + k * math.pi / 2)
        return out


def as_profile(obj) -> BoundaryProfile:
    if isinstance(obj, BoundaryProfile):
        return obj
    if isinstance(obj, (int, float)):
        return BoundaryProfile((float(obj),))
    raise UsageError(f"unsupported boundary profile {obj!r}: use BoundaryProfile "
                     "(polynomial and sinusoidal terms)")


def _poly_particular(lam: float, q: np.ndarray) -> np.ndarray:
    """Polynomial y with y' + lam y = q for polynomial q (coefficients, ascending)."""
    if lam == 0.0:
        return npoly.polyint(q)
    out = np.zeros(max(len(q), 1))
    term = np.asarray(q, float)
    j = 0
    while term.size and np.any(term):
        out[:term.size] += (-1) ** j * term / lam ** (j + 1)
        term = npoly.polyder(term)
        j += 1
    return out


def generate_local_solution(space: DiscreteDirichletSpace, U: VertexSubset, boundary_data,
                            grid: TimeGrid, u0_interior=None) -> SpaceTimeField:
    """Genuinely local solution on U driven by prescribed boundary values.

    The boundary of U is the set of its vertices with a neighbour outside U;
    the remaining vertices follow  m u' = -(K u)  with the boundary values
    g(t) substituted, i.e.  u_I' = -P_II u_I - M_I^{-1} K_IB g(t).  In the
    Dirichlet eigenbasis each mode solves y' + lam y = -beta(t) with beta a
    combination of polynomials and sinusoids, solved in closed form.

    ``boundary_data`` maps each boundary vertex to a BoundaryProfile (or a
    constant); a single profile is used for every boundary vertex.
    ``u0_interior`` defaults to the transient-free start y(a) = y_particular(a).
    """
    dom = U.members
    bnd = dom & space.neighbors_closure(~dom)
    inner = dom & ~bnd
    I, B = np.flatnonzero(inner), np.flatnonzero(bnd)
    if I.size == 0:
        raise UsageError("U has no interior vertices")
    if isinstance(boundary_data, dict):
        profiles = {int(x): as_profile(boundary_data[int(x)]) for x in B}
    else:
        p = as_profile(boundary_data)
        profiles = {int(x): p for x in B}
    K = space.stiffness().tocsr()
    KII = K[I][:, I].toarray()
    KIB = K[I][:, B].toarray()
    mI = space.measure[I]
    r = 1.0 / np.sqrt(mI)
    lam, V = np.linalg.eigh(r[:, None] * KII * r[None, :])
    Phi = r[:, None] * V  # m-orthonormal Dirichlet modes
    drive = Phi.T @ KIB  # beta(t) = drive @ g_B(t)

    # collect the forcing of every mode as polynomial + sinusoid terms
    deg = max(len(profiles[int(x)].poly) for x in B)
    poly_B = np.zeros((B.size, deg))
    for col, x in enumerate(B):
        c = np.asarray(profiles[int(x)].poly, float)
        poly_B[col, :c.size] = c
    poly_modes = -(drive @ poly_B)  # modal right-hand side coefficients
    trig_terms = {}
    for col, x in enumerate(B):
        for amp, freq, phase in profiles[int(x)].trig:
            key = (float(freq), float(phase))
            trig_terms.setdefault(key, np.zeros(B.size))[col] += amp
    trig_modes = {key: -(drive @ amps) for key, amps in trig_terms.items()}

    yp_poly = np.array([_poly_particular(lam[j], poly_modes[j]) for j in range(I.size)],
                       dtype=object)
    width = max(len(c) for c in yp_poly)
    yp_poly = np.array([np.pad(np.asarray(c, float), (0, width - len(c))) for c in yp_poly])
    # y' + lam y = A sin(w t + ph)  =>  y = Im(A e^{i(w t + ph)} / (lam + i w))
    trig_gain = {key: amps / (lam + 1j * key[0]) for key, amps in trig_modes.items()}

    def particular(t, k):
        t = np.atleast_1d(t)
        coeffs = yp_poly
        if k:
            coeffs = np.array([npoly.polyder(c, k) if c.size > k else np.zeros(1) for c in coeffs])
            if coeffs.ndim == 1:
                coeffs = coeffs[:, None]
        out = np.stack([npoly.polyval(t, c) for c in coeffs], axis=1)
        for (freq, phase), gain in trig_gain.items():
            rot = (1j * freq) ** k * np.exp(1j * (freq * t + phase))
            out = out + np.imag(np.outer(rot, gain))
        return out

    a = grid.a
    yp_a = particular(np.array([a]), 0)[0]
    if u0_interior is None:
        y0 = yp_a
    else:
        u0 = np.asarray(u0_interior, float)
        if u0.shape == (space.n,):
            u0 = u0[I]
        if u0.shape != (I.size,):
            raise UsageError("u0_interior must give one value per interior vertex")
        y0 = Phi.T @ (mI * u0)
    transient = y0 - yp_a

    def fn(t, k):
        t = np.atleast_1d(np.asarray(t, float))
        modal = particular(t, k) + ((-lam)[None, :] ** k * np.exp(-np.outer(t - a, lam))
                                    * transient[None, :])
        out = np.zeros((t.size, space.n))
        out[:, I] = modal @ Phi.T
        for x in B:
            out[:, x] = profiles[int(x)](t, k)
        return out

    meta = {"kind": "local", "interior": I.tolist(), "boundary": B.tolist(),
            "dirichlet_eigenvalues": lam.tolist()}
    return SpaceTimeField(grid, fn, dom.copy(), None, "analytic", meta)


def dirichlet_modes(space: DiscreteDirichletSpace, U: VertexSubset):
    """Interior vertices, boundary vertices and m-orthonormal Dirichlet modes of U."""
    dom = U.members
    bnd = dom & space.neighbors_closure(~dom)
    I = np.flatnonzero(dom & ~bnd)
    K = space.stiffness().tocsr()[I][:, I].toarray()
    r = 1.0 / np.sqrt(space.measure[I])
    lam, V = np.linalg.eigh(r[:, None] * K * r[None, :])
    return I, np.flatnonzero(bnd), lam, r[:, None] * V


# --- derivative regularity -------------------------------------------------------------

@dataclass
class RegularityReport:
    k: int
    residual: ResidualNorm
    sobolev_norm: float
    differencing_error: float | None = None


def local_energy(space: DiscreteDirichletSpace, domain: np.ndarray, U: np.ndarray) -> np.ndarray:
    """E restricted to edges inside the domain, for each row of U."""
    i, j = space.edges[:, 0], space.edges[:, 1]
    keep = domain[i] & domain[j]
    d = U[:, i[keep]] - U[:, j[keep]]
    jump = (d ** 2) @ space.cond[keep]
    kill = (U[:, domain] ** 2) @ (space.killing * space.measure)[domain]
    return jump + kill


def verify_derivative_regularity(space: DiscreteDirichletSpace, u: SpaceTimeField,
                                 f: SpaceTimeField, k: int,
                                 basis: Sequence[TestFunction]) -> RegularityReport:
    """Residual of (d_t^k u, d_t^k f) and the W^{k,2}(I -> F)-type norm.

    Sampled fields are differenced; they need at least 4k + 1 nodes and the
    report then carries the gap between differencing at dt and at 2 dt.
    """
    if k < 1:
        raise UsageError("k must be a positive integer")
    diff_err = None
    if u.tag == "sampled":
        if u.grid.n_nodes < 4 * k + 1:
            raise UsageError(f"differencing order {k} needs at least {4 * k + 1} nodes")
        vals = u.values()
        fine = _difference(vals, u.grid.dt, k)
        coarse = _difference(vals[::2], 2 * u.grid.dt, k)
        diff_err = float(np.max(np.abs(fine[::2] - coarse)))
    uk, fk = u.derivative(k), f.derivative(k)
    res = residual_norm(space, uk, fk, basis)
    t = u.grid.nodes
    total = 0.0
    for j in range(k + 1):
        Uj = u.at(t, j)
        mass = (Uj ** 2) @ space.measure
        total += float(simpson(mass + local_energy(space, u.domain, Uj), x=t))
    return RegularityReport(k, res, math.sqrt(total), diff_err)


def integration_by_parts_gap(space: DiscreteDirichletSpace, u: SpaceTimeField,
                             phi: TestFunction) -> float:
    """int E(u, d_t phi) dt + int E(d_t u, phi) dt, which vanishes for smooth u."""
    t = u.grid.nodes
    kpsi = space.stiffness() @ phi.psi
    g = phi.w(t, 1) * (u.at(t) @ kpsi) + phi.w(t) * (u.at(t, 1) @ kpsi)
    return float(simpson(g, x=t))


# --- serialisation --------------------------------------------------------------------

def field_to_csv(u: SpaceTimeField) -> str:
    vals = u.values()
    buf = io.StringIO()
    buf.write("t,vertex,value\n")
    for ti, t in enumerate(u.grid.nodes):
        for x in np.flatnonzero(u.domain):
            buf.write(f"{t!r},{x},{vals[ti, x]!r}\n")
    return buf.getvalue()


def field_sidecar(u: SpaceTimeField) -> str:
    doc = {"grid": {"a": u.grid.a, "b": u.grid.b, "nodes": u.grid.n_nodes},
           "tag": u.tag, "derivative_orders": "all" if u.n_max is None else u.n_max,
           "domain": np.flatnonzero(u.domain).tolist(),
           "metadata": {k: v for k, v in u.metadata.items()
                        if isinstance(v, (int, float, str, list))}}
    return json.dumps(doc, sort_keys=True)
