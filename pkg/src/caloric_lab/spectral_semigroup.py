"""Exact spectral calculus for the generator P = M^-1 K of a finite space.

P is self-adjoint in L^2(m).  Conjugating with M^(1/2) gives the symmetric
matrix M^(-1/2) K M^(-1/2), whose dense eigendecomposition yields
m-orthonormal eigenvectors phi_i = M^(-1/2) v_i.  Every function of P
(heat semigroup, its time derivatives, resolvent, complex times) is then a
diagonal scaling of the coefficients <f, phi_i>_m.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ResourceError, UsageError
from .space_builders import DiscreteDirichletSpace

VERTEX_CAP = 4000


@dataclass(frozen=True, eq=False)
class SpectralDecomposition:
    eigenvalues: np.ndarray
    vectors: np.ndarray  # columns are m-orthonormal eigenfunctions
    residuals: np.ndarray
    space: DiscreteDirichletSpace

    @property
    def n(self) -> int:
        return self.eigenvalues.size

    def coefficients(self, f) -> np.ndarray:
        f = np.asarray(f)
        if f.shape[0] != self.n:
            raise UsageError(f"function has length {f.shape[0]}, expected {self.n}")
        return self.vectors.T @ (self.space.measure[:, None] * f if f.ndim > 1
                                 else self.space.measure * f)

    def synthesize(self, coeffs) -> np.ndarray:
        return self.vectors @ coeffs

    def apply_function(self, values, f) -> np.ndarray:
        """g(P) f for the spectral multiplier values g(lambda_i)."""
        c = self.coefficients(f)
        if c.ndim > 1:
            return self.vectors @ (np.asarray(values)[:, None] * c)
        return self.vectors @ (np.asarray(values) * c)

    def operator(self, values) -> np.ndarray:
        """Dense matrix of g(P) acting on nodal vectors."""
        return (self.vectors * np.asarray(values)) @ (self.vectors.T * self.space.measure)

    def to_json(self) -> str:
        doc = {"eigenvalues": [float(v) for v in self.eigenvalues],
               "residual_norms": [float(v) for v in self.residuals]}
        return json.dumps(doc, separators=(",", ":")) + "\n"


def decompose(space: DiscreteDirichletSpace, vertex_cap: int = VERTEX_CAP,
              residual_tol: float = 1e-8) -> SpectralDecomposition:
    """Dense eigendecomposition of the symmetrised generator."""
    if space.n > vertex_cap:
        raise ResourceError(f"{space.n} vertices exceed the dense eigensolver cap {vertex_cap}")
    root = np.sqrt(space.measure)
    K = space.stiffness().toarray()
    S = K / root[:, None] / root[None, :]
    S = 0.5 * (S + S.T)
    try:
        lam, V = np.linalg.eigh(S)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigensolver failed: {exc}") from exc
    scale = max(1.0, float(np.abs(lam).max()))
    # roundoff can push the kernel slightly negative
    lam = np.where(lam < 0, np.where(lam > -1e-10 * scale, 0.0, lam), lam)
    if lam.min() < 0:
        raise NumericError(f"generator has a negative eigenvalue {lam.min():.3e}")
    res = np.linalg.norm(S @ V - V * lam, axis=0)
    if res.max() > residual_tol * scale:
        raise NumericError("eigen residuals above tolerance", payload=res)
    phi = V / root[:, None]
    # fix signs so that output is deterministic across LAPACK builds
    pivot = np.argmax(np.abs(phi) > 1e-12 * np.abs(phi).max(axis=0), axis=0)
    sign = np.sign(phi[pivot, np.arange(phi.shape[1])])
    sign[sign == 0] = 1.0
    phi = phi * sign
    for a in (lam, phi, res):
        a.setflags(write=False)
    return SpectralDecomposition(lam, phi, res, space)


def _check_time(t: float, k: int = 0) -> None:
    if not t >= 0:
        raise UsageError("time must be nonnegative")
    if k >= 1 and t == 0:
        raise UsageError("derivatives of order >= 1 need t > 0")


def apply_heat(decomp: SpectralDecomposition, t: float, f) -> np.ndarray:
    """H_t f = sum_i exp(-lambda_i t) <f, phi_i> phi_i."""
    _check_time(t)
    return decomp.apply_function(np.exp(-decomp.eigenvalues * t), f)


def derivative_multiplier(lam: np.ndarray, k: int, t: float) -> np.ndarray:
    """(-lambda)^k exp(-lambda t), the symbol of d^k/dt^k H_t."""
    return (-lam) ** k * np.exp(-lam * t)


def apply_heat_derivative(decomp: SpectralDecomposition, k: int, t: float, f) -> np.ndarray:
    """d^k/dt^k H_t f = (-P)^k H_t f."""
    if int(k) != k or k < 0:
        raise UsageError("derivative order must be a nonnegative integer")
    _check_time(t, k)
    return decomp.apply_function(derivative_multiplier(decomp.eigenvalues, int(k), t), f)


def resolvent(decomp: SpectralDecomposition, alpha: float, f) -> np.ndarray:
    """G_alpha f = (alpha + P)^-1 f."""
    if not alpha > 0:
        raise UsageError("resolvent parameter must be positive")
    return decomp.apply_function(1.0 / (alpha + decomp.eigenvalues), f)


def apply_heat_complex(decomp: SpectralDecomposition, z: complex, f) -> np.ndarray:
    """H_z f for Re z > 0, returned as a complex vector."""
    z = complex(z)
    if not z.real > 0:
        raise UsageError("complex time must have positive real part")
    c = decomp.coefficients(np.asarray(f, float))
    return decomp.vectors @ (np.exp(-z * decomp.eigenvalues) * c)


def heat_derivative_norm(decomp: SpectralDecomposition, k: int, t: float) -> float:
    """Operator norm of d^k/dt^k H_t on L^2(m): max_i lambda_i^k exp(-lambda_i t)."""
    _check_time(t, k)
    return float(np.max(np.abs(derivative_multiplier(decomp.eigenvalues, k, t))))


def spectral_bound(k: int, t: float) -> float:
    """(k / (e t))^k, the universal bound for sup_lambda lambda^k exp(-lambda t)."""
    if k == 0:
        return 1.0
    return (k / (math.e * t)) ** k


def inner(space: DiscreteDirichletSpace, f, g) -> complex | float:
    """<f, g>_{L^2(m)}, conjugate-linear in g for complex data."""
    return np.sum(space.measure * np.asarray(f) * np.conj(np.asarray(g)))


def norm(space: DiscreteDirichletSpace, f) -> float:
    f = np.asarray(f)
    return float(np.sqrt(np.sum(space.measure * np.abs(f) ** 2)))
