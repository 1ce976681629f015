"""Energy form, carre du champ and the calculus rules on a weighted graph.

Conventions: an edge {x, y} with conductance c contributes the half-edge
quantity  c/2 (u(x)-u(y))(v(x)-v(y))  to each endpoint, so that

    Gamma(u, v)(x) m(x) = sum_y c_xy/2 (u(x)-u(y))(v(x)-v(y))

and  sum_x Gamma(u, v)(x) m(x) + sum_x k_x u v m(x) = E(u, v)  exactly.
Signed defects are measured in total variation over half-edges, the graph
counterpart of the L^1 norm of a measure living on X x X.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import reports
from .errors import PreconditionError, UsageError, ValidationError
from .space_builders import DiscreteDirichletSpace, VertexSubset


def as_vertex_function(space: DiscreteDirichletSpace, f, name: str = "f") -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.shape != (space.n,):
        raise UsageError(f"{name} has shape {f.shape}, expected ({space.n},)")
    if not np.all(np.isfinite(f)):
        raise UsageError(f"{name} has non-finite values")
    return f


def half_edges(space: DiscreteDirichletSpace):
    """Both orientations of every edge: (tail, head, c/2)."""
    i, j = space.edges[:, 0], space.edges[:, 1]
    half = 0.5 * space.cond
    return np.concatenate([i, j]), np.concatenate([j, i]), np.concatenate([half, half])


def edge_differences(space: DiscreteDirichletSpace, f: np.ndarray) -> np.ndarray:
    return f[space.edges[:, 0]] - f[space.edges[:, 1]]


def energy(space: DiscreteDirichletSpace, f, g) -> float:
    """E(f, g) = sum_edges c df dg + sum_x k_x f g m_x."""
    f = as_vertex_function(space, f, "f")
    g = as_vertex_function(space, g, "g")
    jump = np.dot(space.cond, edge_differences(space, f) * edge_differences(space, g))
    return float(jump + np.dot(space.killing * space.measure, f * g))


def gamma(space: DiscreteDirichletSpace, u, v) -> np.ndarray:
    """Energy-measure density dGamma(u, v)/dm at every vertex."""
    return gamma_mass(space, u, v) / space.measure


def gamma_mass(space: DiscreteDirichletSpace, u, v) -> np.ndarray:
    """Gamma(u, v)(x) m(x), the vertex masses of the energy measure."""
    u = as_vertex_function(space, u, "u")
    v = as_vertex_function(space, v, "v")
    w = space.cond * edge_differences(space, u) * edge_differences(space, v) * 0.5
    out = np.zeros(space.n)
    np.add.at(out, space.edges[:, 0], w)
    np.add.at(out, space.edges[:, 1], w)
    return out


def abs_gamma_mass(space: DiscreteDirichletSpace, u, v) -> np.ndarray:
    """|Gamma(u, v)| with absolute values taken per half-edge before summing."""
    u = as_vertex_function(space, u, "u")
    v = as_vertex_function(space, v, "v")
    w = np.abs(space.cond * edge_differences(space, u) * edge_differences(space, v)) * 0.5
    out = np.zeros(space.n)
    np.add.at(out, space.edges[:, 0], w)
    np.add.at(out, space.edges[:, 1], w)
    return out


def integrate(space: DiscreteDirichletSpace, weight, u, v) -> float:
    """int weight dGamma(u, v)."""
    weight = as_vertex_function(space, weight, "weight")
    return float(np.dot(weight, gamma_mass(space, u, v)))


def leibniz_defect(space: DiscreteDirichletSpace, u, v, w) -> float:
    """Total variation of  Gamma(uv, w) - u Gamma(v, w) - v Gamma(u, w).

    The product rule is evaluated at the tail of each half-edge, as the
    vertex densities are.  Expanding,
    (u_x v_x - u_y v_y) - u_x (v_x - v_y) - v_x (u_x - u_y) = -(u_x - u_y)(v_x - v_y),
    and the factored form is used so that a constant argument gives exactly 0.
    """
    u = as_vertex_function(space, u, "u")
    v = as_vertex_function(space, v, "v")
    w = as_vertex_function(space, w, "w")
    x, y, half = half_edges(space)
    dw = w[x] - w[y]
    term = -(u[x] - u[y]) * (v[x] - v[y]) * dw
    return float(np.sum(half * np.abs(term)))


def chain_defect(space: DiscreteDirichletSpace, phi: Callable, dphi: Callable, u, v) -> float:
    """Total variation of  Gamma(Phi(u), v) - Phi'(u) Gamma(u, v)."""
    u = as_vertex_function(space, u, "u")
    v = as_vertex_function(space, v, "v")
    if abs(float(phi(np.zeros(1))[0])) > 0.0:
        raise ValidationError("Phi(0) must be 0")
    pu = np.asarray(phi(u), float)
    du = np.asarray(dphi(u), float)
    if not (np.all(np.isfinite(pu)) and np.all(np.isfinite(du))):
        raise ValidationError("Phi or Phi' is not finite on the range of u")
    x, y, half = half_edges(space)
    dv = v[x] - v[y]
    term = (pu[x] - pu[y]) * dv - du[x] * (u[x] - u[y]) * dv
    return float(np.sum(half * np.abs(term)))


def cauchy_schwarz_check(space: DiscreteDirichletSpace, f, g, u, v, C: float,
                         rel_tol: float = 1e-12) -> reports.Report:
    """Three forms of the Cauchy-Schwarz inequality for energy measures.

    product:  |int f g dGamma(u,v)| <= (int f^2 dGamma(u,u))^(1/2) (int g^2 dGamma(v,v))^(1/2)
    measure:  int |f g| d|Gamma(u,v)| <= the same right-hand side
    weighted: int f g dGamma(u,v) <= C/2 int f^2 dGamma(u,u) + 1/(2C) int g^2 dGamma(v,v)
    """
    if not C > 0:
        raise UsageError("C must be positive")
    f = as_vertex_function(space, f, "f")
    g = as_vertex_function(space, g, "g")
    fuu = integrate(space, f * f, u, u)
    gvv = integrate(space, g * g, v, v)
    fguv = integrate(space, f * g, u, v)
    abs_uv = float(np.dot(np.abs(f * g), abs_gamma_mass(space, u, v)))
    geo = float(np.sqrt(max(fuu, 0.0) * max(gvv, 0.0)))
    rep = reports.Report("cauchy_schwarz")
    rep.add(reports.leq("product", abs(fguv), geo, rel_tol=rel_tol, abs_tol=1e-300))
    rep.add(reports.leq("measure", abs_uv, geo, rel_tol=rel_tol, abs_tol=1e-300))
    rep.add(reports.leq(f"weighted_C={C:g}", fguv, 0.5 * C * fuu + 0.5 / C * gvv,
                        rel_tol=rel_tol, abs_tol=1e-300))
    return rep


def locality_check(space: DiscreteDirichletSpace, u, v, U: VertexSubset,
                   tol: float = 0.0) -> float:
    """Masked L^1 mass of Gamma(u, v) on U, given v constant on the closure of U."""
    u = as_vertex_function(space, u, "u")
    v = as_vertex_function(space, v, "v")
    vals = v[U.closure]
    if vals.size and np.ptp(vals) > tol:
        raise PreconditionError("v is not constant on the 1-hop closure of U")
    return float(np.sum(abs_gamma_mass(space, u, v)[U.members]))
