"""Finite symmetric Dirichlet spaces: weighted graphs with measure and killing.

A space is stored as an edge list ``(i, j, c)`` with ``i < j`` plus per-vertex
measure and killing arrays.  Every builder returns a frozen
:class:`DiscreteDirichletSpace` whose arrays are read-only, so spaces can be
shared freely.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import ResourceError, UsageError, ValidationError

MAX_GASKET_LEVEL = 7
MAX_PRODUCT_FACTORS = 3
MAX_PRODUCT_VERTICES = 4000
MAX_REFINE_LEVELS = 8

GASKET_RENORMALIZATION = 5.0 / 3.0


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DiscreteDirichletSpace:
    """Weighted graph ``(X, m, c, k)``.

    ``edges`` is an ``(E, 2)`` integer array with ``i < j`` and ``cond`` the
    matching positive conductances.  ``coords`` optionally holds vertex
    positions (used for nodal sampling of smooth functions).
    """

    measure: np.ndarray
    edges: np.ndarray
    cond: np.ndarray
    killing: np.ndarray
    metadata: dict = field(default_factory=dict)
    coords: np.ndarray | None = None
    allow_disconnected: bool = False

    def __post_init__(self):
        m = _frozen(self.measure)
        n = m.size
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        c = np.asarray(self.cond, dtype=float).reshape(-1)
        k = np.zeros(n) if self.killing is None else np.asarray(self.killing, float)
        if m.ndim != 1 or n == 0:
            raise ValidationError("measure must be a nonempty vector")
        if not np.all(np.isfinite(m)) or np.any(m <= 0):
            raise ValidationError("measure must be strictly positive at every vertex")
        if k.shape != (n,) or not np.all(np.isfinite(k)) or np.any(k < 0):
            raise ValidationError("killing must be a nonnegative vector of length n")
        if c.size != e.shape[0]:
            raise ValidationError("one conductance per edge required")
        if not np.all(np.isfinite(c)) or np.any(c < 0):
            raise ValidationError("conductances must be nonnegative")
        if e.size and (e.min() < 0 or e.max() >= n):
            raise ValidationError("edge endpoint out of range")
        if np.any(e[:, 0] == e[:, 1]):
            raise ValidationError("self-loops are not allowed (zero diagonal)")
        # canonical orientation i < j, merge duplicates, drop zero conductances
        lo = np.minimum(e[:, 0], e[:, 1])
        hi = np.maximum(e[:, 0], e[:, 1])
        if e.shape[0]:
            key = lo * n + hi
            uniq, inv = np.unique(key, return_inverse=True)
            cc = np.zeros(uniq.size)
            np.add.at(cc, inv, c)
            keep = cc > 0
            lo, hi, cc = uniq[keep] // n, uniq[keep] % n, cc[keep]
        else:
            cc = c
        object.__setattr__(self, "measure", m)
        object.__setattr__(self, "edges", _frozen(np.stack([lo, hi], axis=1), np.int64))
        object.__setattr__(self, "cond", _frozen(cc))
        object.__setattr__(self, "killing", _frozen(k))
        object.__setattr__(self, "metadata", dict(self.metadata))
        if self.coords is not None:
            xy = np.asarray(self.coords, float)
            if xy.shape[0] != n:
                raise ValidationError("coords must have one row per vertex")
            object.__setattr__(self, "coords", _frozen(xy.reshape(n, -1)))
        if not self.allow_disconnected and self.n_components() != 1:
            raise ValidationError("graph is not connected")

    @property
    def n(self) -> int:
        return self.measure.size

    def conductance_matrix(self) -> sp.csr_matrix:
        i, j = self.edges[:, 0], self.edges[:, 1]
        c = sp.coo_matrix((self.cond, (i, j)), shape=(self.n, self.n))
        return (c + c.T).tocsr()

    def laplacian(self) -> sp.csr_matrix:
        """Graph Laplacian L with ``f.L.g = sum_edges c (f_i - f_j)(g_i - g_j)``."""
        c = self.conductance_matrix()
        deg = np.asarray(c.sum(axis=1)).ravel()
        return (sp.diags(deg) - c).tocsr()

    def stiffness(self) -> sp.csr_matrix:
        """Matrix K of the full form: ``E(f, g) = f.K.g`` (Laplacian plus killing)."""
        return (self.laplacian() + sp.diags(self.killing * self.measure)).tocsr()

    def generator(self) -> sp.csr_matrix:
        """Positive semidefinite generator P = M^-1 K."""
        return (sp.diags(1.0 / self.measure) @ self.stiffness()).tocsr()

    def degree(self) -> np.ndarray:
        deg = np.zeros(self.n)
        np.add.at(deg, self.edges[:, 0], self.cond)
        np.add.at(deg, self.edges[:, 1], self.cond)
        return deg

    def n_components(self) -> int:
        return connected_components(self.conductance_matrix(), directed=False)[0]

    def neighbors_closure(self, members: np.ndarray) -> np.ndarray:
        """1-hop closed neighbourhood of a boolean vertex mask."""
        members = np.asarray(members, bool)
        out = members.copy()
        i, j = self.edges[:, 0], self.edges[:, 1]
        out[j[members[i]]] = True
        out[i[members[j]]] = True
        return out

    def subset(self, indices=None, mask=None) -> "VertexSubset":
        return VertexSubset.of(self, indices=indices, mask=mask)

    def hop_distances(self, members: np.ndarray) -> np.ndarray:
        """Unweighted graph distance from a vertex set (inf if unreachable)."""
        from scipy.sparse.csgraph import shortest_path

        members = np.asarray(members, bool)
        if not members.any():
            raise UsageError("empty source set")
        adj = self.conductance_matrix()
        adj.data[:] = 1.0
        d = shortest_path(adj, unweighted=True, indices=np.flatnonzero(members))
        return d.min(axis=0)


@dataclass(frozen=True, eq=False)
class VertexSubset:
    """Vertex mask plus its 1-hop closure in a given space."""

    members: np.ndarray
    closure: np.ndarray

    @classmethod
    def of(cls, space: DiscreteDirichletSpace, indices=None, mask=None) -> "VertexSubset":
        if (indices is None) == (mask is None):
            raise UsageError("give exactly one of indices or mask")
        if mask is None:
            mask = np.zeros(space.n, bool)
            idx = np.asarray(indices, dtype=np.int64).reshape(-1)
            if idx.size and (idx.min() < 0 or idx.max() >= space.n):
                raise UsageError("vertex index out of range")
            mask[idx] = True
        mask = np.asarray(mask, bool)
        if mask.shape != (space.n,):
            raise UsageError("mask length does not match the space")
        return cls(_frozen(mask, bool), _frozen(space.neighbors_closure(mask), bool))

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.members)

    def __len__(self):
        return int(self.members.sum())

    def complement(self, space: DiscreteDirichletSpace) -> "VertexSubset":
        return VertexSubset.of(space, mask=~self.members)


def _profile(value, size, name) -> np.ndarray:
    if callable(value):
        arr = np.asarray(value(np.arange(size)), float)
    else:
        arr = np.asarray(value, float)
    if arr.ndim == 0:
        arr = np.full(size, float(arr))
    if arr.shape != (size,):
        raise ValidationError(f"{name} profile must have length {size}")
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise ValidationError(f"{name} profile must be strictly positive")
    return arr


def build_path(n_vertices: int, conductance=1.0, measure=1.0, killing=0.0,
               coords=None, metadata=None) -> DiscreteDirichletSpace:
    """Path graph 0 - 1 - ... - (n-1).

    ``conductance`` has one value per edge, ``measure`` one per vertex; both
    may be scalars, arrays or callables of the index array.
    """
    if int(n_vertices) != n_vertices or n_vertices < 2:
        raise ValidationError("a path needs at least 2 vertices")
    n = int(n_vertices)
    c = _profile(conductance, n - 1, "conductance")
    m = _profile(measure, n, "measure")
    k = np.broadcast_to(np.asarray(killing, float), (n,)).copy()
    edges = np.stack([np.arange(n - 1), np.arange(1, n)], axis=1)
    meta = {"builder": "path", "n_vertices": n}
    meta.update(metadata or {})
    xy = np.arange(n, dtype=float)[:, None] if coords is None else coords
    return DiscreteDirichletSpace(m, edges, c, k, meta, coords=xy)


def build_cycle(n_vertices: int, conductance=1.0, measure=1.0) -> DiscreteDirichletSpace:
    """Discrete circle (one-dimensional torus) with ``n_vertices`` >= 3."""
    if n_vertices < 3:
        raise ValidationError("a cycle needs at least 3 vertices")
    n = int(n_vertices)
    c = _profile(conductance, n, "conductance")
    m = _profile(measure, n, "measure")
    edges = np.stack([np.arange(n), (np.arange(n) + 1) % n], axis=1)
    meta = {"builder": "cycle", "n_vertices": n}
    return DiscreteDirichletSpace(m, edges, c, np.zeros(n), meta,
                                  coords=np.arange(n, dtype=float)[:, None])


def build_torus(shape: Sequence[int]) -> DiscreteDirichletSpace:
    """Unit-weight discrete torus Z_{n1} x ... x Z_{nd}."""
    factors = [build_cycle(s) for s in shape]
    if len(factors) == 1:
        return factors[0]
    return build_product(factors, [1.0] * len(factors))


def disjoint_union(spaces: Sequence[DiscreteDirichletSpace]) -> DiscreteDirichletSpace:
    """Disconnected union, the one place a space may have several components."""
    offset, m, e, c, k = 0, [], [], [], []
    for s in spaces:
        m.append(s.measure)
        e.append(s.edges + offset)
        c.append(s.cond)
        k.append(s.killing)
        offset += s.n
    meta = {"builder": "disjoint_union", "parts": [s.metadata for s in spaces]}
    return DiscreteDirichletSpace(np.concatenate(m), np.concatenate(e), np.concatenate(c),
                                  np.concatenate(k), meta, allow_disconnected=True)


def _cell_coefficients(coeff, nx, ny) -> np.ndarray:
    a = np.asarray(coeff, float)
    if a.shape == (2, 2):
        a = np.broadcast_to(a, (ny - 1, nx - 1, 2, 2))
    if a.shape != (ny - 1, nx - 1, 2, 2):
        raise ValidationError(f"coefficient field must be 2x2 or shape {(ny - 1, nx - 1, 2, 2)}")
    return np.array(a)


def build_grid2d(nx: int, ny: int, coeff=None, mesh_h: float = 1.0,
                 ellipticity: tuple[float, float] | None = None) -> DiscreteDirichletSpace:
    """Finite-difference graph for the energy  int sum a_ij d_i f d_j g dx.

    Vertices are row-major (x index fastest).  Each cell carries a symmetric
    2x2 coefficient.  The cell coefficient is split as
    ``(a11-|a12|) d1^2 + (a22-|a12|) d2^2 + |a12| (d1 + sgn(a12) d2)^2``, so an
    axis edge gets the mean of its adjacent cells' axis parts and each cell
    contributes one diagonal edge when a12 != 0.  Conductances must stay
    nonnegative, which needs |a12| <= min(a11, a22) in every cell.

    Measure is the lumped mass h^2, halved on edges and quartered at corners.
    """
    if nx < 2 or ny < 2:
        raise ValidationError("grid needs at least 2 vertices per direction")
    if not mesh_h > 0:
        raise ValidationError("mesh width must be positive")
    a = _cell_coefficients(np.eye(2) if coeff is None else coeff, nx, ny)
    eps, cap = ellipticity if ellipticity is not None else (0.0, np.inf)
    if not 0 <= eps <= cap:
        raise ValidationError("ellipticity bounds must satisfy 0 <= eps <= C")
    for (cj, ci) in itertools.product(range(ny - 1), range(nx - 1)):
        cell = a[cj, ci]
        if not np.allclose(cell, cell.T, rtol=0, atol=1e-14):
            raise ValidationError(f"coefficient at cell (i={ci}, j={cj}) is not symmetric")
        lam = np.linalg.eigvalsh(cell)
        if lam[0] <= 0 or lam[0] < eps - 1e-14 or lam[-1] > cap + 1e-14:
            raise ValidationError(
                f"coefficient at cell (i={ci}, j={cj}) violates ellipticity: eigenvalues {lam}")
        if abs(cell[0, 1]) > min(cell[0, 0], cell[1, 1]) + 1e-14:
            raise ValidationError(
                f"coefficient at cell (i={ci}, j={cj}) is not diagonally dominant; "
                "the stencil would need negative conductances")

    def vid(i, j):
        return j * nx + i

    off = np.abs(a[..., 0, 1])
    ax = a[..., 0, 0] - off
    ay = a[..., 1, 1] - off
    edges, cond = [], []
    for j in range(ny):
        for i in range(nx - 1):
            cells = [ax[cj, i] for cj in (j - 1, j) if 0 <= cj < ny - 1]
            edges.append((vid(i, j), vid(i + 1, j)))
            cond.append(float(np.mean(cells)))
    for j in range(ny - 1):
        for i in range(nx):
            cells = [ay[j, ci] for ci in (i - 1, i) if 0 <= ci < nx - 1]
            edges.append((vid(i, j), vid(i, j + 1)))
            cond.append(float(np.mean(cells)))
    for j in range(ny - 1):
        for i in range(nx - 1):
            a12 = a[j, i, 0, 1]
            if a12 > 0:
                edges.append((vid(i, j), vid(i + 1, j + 1)))
            elif a12 < 0:
                edges.append((vid(i + 1, j), vid(i, j + 1)))
            else:
                continue
            cond.append(abs(a12))
    # h^(dim-2) = 1 in two dimensions, so conductances are mesh independent
    wx = np.ones(nx)
    wx[[0, -1]] = 0.5
    wy = np.ones(ny)
    wy[[0, -1]] = 0.5
    m = (np.outer(wy, wx) * mesh_h ** 2).ravel()
    gx, gy = np.meshgrid(np.arange(nx) * mesh_h, np.arange(ny) * mesh_h)
    xy = np.stack([gx.ravel(), gy.ravel()], axis=1)
    meta = {"builder": "grid2d", "nx": nx, "ny": ny, "mesh_h": mesh_h}
    return DiscreteDirichletSpace(m, np.array(edges), np.array(cond), np.zeros(nx * ny),
                                  meta, coords=xy)


_GASKET_CORNERS = np.array([[0, 0], [1, 0], [0, 1]], dtype=np.int64)


def build_gasket(level: int, max_level: int = MAX_GASKET_LEVEL) -> DiscreteDirichletSpace:
    """Level-``level`` graph approximation of the Sierpinski gasket.

    The three corners come first; the remaining vertices are numbered by first
    appearance when cells are enumerated by address words in lexicographic
    order.  Points
    are kept as exact integer coordinates (scaled by 2^level) in the basis
    spanned by the corner vectors.
    """
    if int(level) != level or level < 0:
        raise ValidationError("level must be a nonnegative integer")
    if level > max_level:
        raise ResourceError(f"gasket level {level} exceeds the cap {max_level}")
    level = int(level)
    side = 1 << level
    index = {(0, 0): 0, (side, 0): 1, (0, side): 2}
    edges = []
    cell_vertices = []
    for word in itertools.product(range(3), repeat=level):
        base = np.zeros(2, np.int64)
        for depth, letter in enumerate(word, start=1):
            base += _GASKET_CORNERS[letter] << (level - depth)
        verts = []
        for corner in _GASKET_CORNERS:
            key = tuple(int(v) for v in base + corner)
            if key not in index:
                index[key] = len(index)
            verts.append(index[key])
        cell_vertices.append(verts)
        edges += [(verts[0], verts[1]), (verts[0], verts[2]), (verts[1], verts[2])]
    n = len(index)
    m = np.zeros(n)
    share = 3.0 ** (-level) / 3.0
    for verts in cell_vertices:
        m[verts] += share
    pts = np.array(list(index.keys()), float) / 2 ** level
    xy = np.stack([pts[:, 0] + 0.5 * pts[:, 1], pts[:, 1] * np.sqrt(3) / 2], axis=1)
    cond = np.full(len(edges), GASKET_RENORMALIZATION ** level)
    meta = {"builder": "gasket", "level": level}
    return DiscreteDirichletSpace(m, np.array(edges), cond, np.zeros(n), meta, coords=xy)


def build_product(factors: Sequence[DiscreteDirichletSpace], weights: Sequence[float],
                  max_factors: int = MAX_PRODUCT_FACTORS,
                  max_vertices: int = MAX_PRODUCT_VERTICES) -> DiscreteDirichletSpace:
    """Cartesian product carrying the form  sum_i a_ii E_i (x) (other measures).

    Vertex order is row-major with the first factor varying slowest.  Killing
    densities add up as  sum_i a_ii k_i(x_i).
    """
    factors = list(factors)
    w = np.asarray(weights, float).reshape(-1)
    if not 1 <= len(factors) <= max_factors:
        raise ResourceError(f"number of factors must be between 1 and {max_factors}")
    if w.size != len(factors) or np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise ValidationError("one positive weight per factor required")
    shape = tuple(f.n for f in factors)
    total = int(np.prod(shape))
    if total > max_vertices:
        raise ResourceError(f"product has {total} vertices, cap is {max_vertices}")
    grids = np.indices(shape).reshape(len(shape), -1)
    m = np.ones(total)
    k = np.zeros(total)
    for d, f in enumerate(factors):
        m *= f.measure[grids[d]]
        k += w[d] * f.killing[grids[d]]
    ids = np.arange(total).reshape(shape)
    edges, cond = [], []
    for d, f in enumerate(factors):
        other = [factors[q].measure for q in range(len(factors)) if q != d]
        other_shape = [s for q, s in enumerate(shape) if q != d]
        rest = np.ones(other_shape) if other else np.ones(())
        for q, meas in enumerate(other):
            sh = [1] * len(other)
            sh[q] = meas.size
            rest = rest * meas.reshape(sh)
        for (a, b), c in zip(f.edges, f.cond):
            ia = np.take(ids, a, axis=d).ravel()
            ib = np.take(ids, b, axis=d).ravel()
            edges.append(np.stack([ia, ib], axis=1))
            cond.append(w[d] * c * rest.ravel())
    meta = {"builder": "product", "factors": [f.metadata for f in factors],
            "weights": w.tolist()}
    coords = None
    if all(f.coords is not None for f in factors):
        coords = np.concatenate([f.coords[grids[d]] for d, f in enumerate(factors)], axis=1)
    return DiscreteDirichletSpace(m, np.concatenate(edges), np.concatenate(cond), k, meta,
                                  coords=coords)


@dataclass(frozen=True, eq=False)
class RefinementFamily:
    """Spaces at halving mesh widths with nodal coarse-to-fine injections.

    ``injections[l]`` maps vertex indices of level ``l`` to level ``l+1``.
    """

    kind: str
    spaces: tuple
    mesh_widths: tuple
    injections: tuple

    def embed(self, level: int, f: np.ndarray) -> np.ndarray:
        """Interpolate a level-``level`` nodal function onto level ``level+1``.

        Shared nodes keep their values; new nodes are filled by (bi)linear
        interpolation.
        """
        coarse, fine = self.spaces[level], self.spaces[level + 1]
        f = np.asarray(f, float)
        if self.kind == "path":
            return np.interp(fine.coords[:, 0], coarse.coords[:, 0], f)
        nx, ny = coarse.metadata["nx"], coarse.metadata["ny"]
        grid = f.reshape(ny, nx)
        fnx, fny = fine.metadata["nx"], fine.metadata["ny"]
        out = np.empty((fny, fnx))
        out[::2, ::2] = grid
        out[::2, 1::2] = 0.5 * (grid[:, :-1] + grid[:, 1:])
        out[1::2, :] = 0.5 * (out[:-1:2, :] + out[2::2, :])
        return out.ravel()


def refine(family_kind: str, levels: int, n0: int = 9, coeff=None,
           nx0: int | None = None, ny0: int | None = None) -> RefinementFamily:
    """Build a family on the unit interval or unit square with h halved per level.

    Path levels carry conductance 1/h and measure h (h/2 at the ends), the
    standard discretisation of  int f'^2 dx  with lumped mass.
    """
    if int(levels) != levels or not 1 <= levels <= MAX_REFINE_LEVELS:
        raise UsageError(f"levels must be an integer in [1, {MAX_REFINE_LEVELS}]")
    spaces, widths, maps = [], [], []
    if family_kind == "path":
        n = n0
        for lev in range(levels):
            h = 1.0 / (n - 1)
            m = np.full(n, h)
            m[[0, -1]] = h / 2
            spaces.append(build_path(n, 1.0 / h, m, coords=(np.arange(n) * h)[:, None],
                                     metadata={"builder": "refine-path", "mesh_h": h,
                                               "level": lev}))
            widths.append(h)
            if lev:
                maps.append(_frozen(2 * np.arange(spaces[-2].n), np.int64))
            n = 2 * (n - 1) + 1
    elif family_kind == "grid2d":
        nx = nx0 or n0
        ny = ny0 or nx
        if nx != ny:
            raise UsageError("grid refinement uses the unit square, so nx must equal ny")
        base_cells = None if coeff is None else np.asarray(coeff, float)
        for lev in range(levels):
            h = 1.0 / (nx - 1)
            a = np.eye(2) if base_cells is None else base_cells
            if a.ndim == 4:
                a = np.repeat(np.repeat(a, 2 ** lev, axis=0), 2 ** lev, axis=1)
            spaces.append(build_grid2d(nx, ny, a, h))
            widths.append(h)
            if lev:
                cnx = spaces[-2].metadata["nx"]
                cj, ci = np.divmod(np.arange(spaces[-2].n), cnx)
                maps.append(_frozen(2 * cj * nx + 2 * ci, np.int64))
            nx, ny = 2 * (nx - 1) + 1, 2 * (ny - 1) + 1
    else:
        raise UsageError(f"unsupported refinement family {family_kind!r}")
    return RefinementFamily(family_kind, tuple(spaces), tuple(widths), tuple(maps))


# --- serialization -----------------------------------------------------------

def space_to_json(space: DiscreteDirichletSpace) -> str:
    """Deterministic JSON text with hexadecimal floats (bit-exact round trip)."""
    doc = {
        "vertices": int(space.n),
        "measure": [float(v).hex() for v in space.measure],
        "edges": [[int(i), int(j), float(c).hex()] for (i, j), c in zip(space.edges, space.cond)],
        "killing": [float(v).hex() for v in space.killing],
        "metadata": space.metadata,
    }
    if space.coords is not None:
        doc["coords"] = [[float(v).hex() for v in row] for row in space.coords]
    return json.dumps(doc, indent=None, separators=(",", ":"), sort_keys=False) + "\n"


def _unhex(v) -> float:
    return float.fromhex(v) if isinstance(v, str) else float(v)


def space_from_json(text: str) -> DiscreteDirichletSpace:
    try:
        doc = json.loads(text)
        n = int(doc["vertices"])
        m = np.array([_unhex(v) for v in doc["measure"]])
        raw = doc["edges"]
        e = np.array([[int(r[0]), int(r[1])] for r in raw], np.int64).reshape(-1, 2)
        c = np.array([_unhex(r[2]) for r in raw])
        k = np.array([_unhex(v) for v in doc.get("killing", [0.0] * n)])
        coords = doc.get("coords")
        if coords is not None:
            coords = np.array([[_unhex(v) for v in row] for row in coords])
        meta = doc.get("metadata", {})
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise ValidationError(f"malformed space document: {exc}") from exc
    if m.size != n:
        raise ValidationError("vertex count does not match the measure length")
    return DiscreteDirichletSpace(m, e, c, k, meta, coords=coords)


Profile = Callable[[np.ndarray], np.ndarray]


def sample(space: DiscreteDirichletSpace, fn: Profile) -> np.ndarray:
    """Nodal samples of ``fn`` evaluated on the vertex coordinates."""
    if space.coords is None:
        raise UsageError("space has no coordinates to sample on")
    xy = space.coords
    return np.asarray(fn(*xy.T) if xy.shape[1] > 1 else fn(xy[:, 0]), float)
