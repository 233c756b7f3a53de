"""Shared domain types and small helpers used across the package.

Conventions: 2x2 complex matrices are plain (2, 2) numpy arrays; the matrix
"norm" is the entrywise sup norm; dagger is the conjugate transpose.
"""

from dataclasses import dataclass

import numpy as np

SIGMA_1 = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
SIGMA_2 = np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex)
SIGMA_3 = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)
IDENTITY_2 = np.eye(2, dtype=complex)

PAULI = (SIGMA_1, SIGMA_2, SIGMA_3)


class DiagonalKernelError(ValueError):
    """Raised when a kernel is evaluated at a coincidence point where it jumps."""


class QuadratureError(RuntimeError):
    """Raised when a quadrature refinement fails to converge.

    Carries the last two estimates so callers can inspect the discrepancy.
    """

    def __init__(self, message, last=None, previous=None):
        super().__init__(message)
        self.last = last
        self.previous = previous


def sup_norm(a):
    """Entrywise sup norm of a matrix (or batch of matrices over last two axes)."""
    a = np.asarray(a)
    return np.max(np.abs(a), axis=(-2, -1))


def dagger(a):
    """Conjugate transpose over the last two axes."""
    a = np.asarray(a)
    return np.conj(np.swapaxes(a, -2, -1))


def bracket_xi(xi):
    """sqrt(1 + xi^2), the momentum bracket used in the fiber formulas."""
    return np.sqrt(1.0 + np.asarray(xi, dtype=float) ** 2)


def bracket_u(u):
    """(1 + |u|)^(1/2), the energy bracket used in resolvent bound fitting.

    Distinct from bracket_xi on purpose; do not interchange them.
    """
    return np.sqrt(1.0 + np.abs(np.asarray(u, dtype=float)))


@dataclass(frozen=True)
class BoundaryParam:
    """Boundary coupling gamma in psi_2(x1, 0) = gamma * psi_1(x1, 0).

    Only 0 < gamma < inf is admitted; the zigzag endpoints 0 and inf are
    rejected at construction.
    """

    gamma: float

    def __post_init__(self):
        g = float(self.gamma)
        if not np.isfinite(g) or g <= 0.0:
            raise ValueError(
                f"gamma must be finite and positive (zigzag values excluded), got {self.gamma!r}"
            )
        object.__setattr__(self, "gamma", g)


@dataclass(frozen=True)
class SpectralPoint:
    """Complex energy z = u + i v with v != 0."""

    u: float
    v: float

    def __post_init__(self):
        if self.v == 0.0 or not np.isfinite(self.u) or not np.isfinite(self.v):
            raise ValueError(f"spectral point must have Im z != 0, got u={self.u}, v={self.v}")

    @property
    def z(self):
        return complex(self.u, self.v)

    @property
    def bracket_u(self):
        return float(bracket_u(self.u))


@dataclass(frozen=True)
class HalfPlanePoint:
    """Point x = (x1, x2) with x2 > 0."""

    x1: float
    x2: float

    def __post_init__(self):
        if not (self.x2 > 0.0):
            raise ValueError(f"half-plane point needs x2 > 0, got x2={self.x2}")

    def as_array(self):
        return np.array([self.x1, self.x2], dtype=float)


def as_halfplane_array(x, allow_boundary=False):
    """Accept a HalfPlanePoint or a length-2 sequence; return float array (2,)."""
    if isinstance(x, HalfPlanePoint):
        return x.as_array()
    arr = np.asarray(x, dtype=float)
    if arr.shape != (2,):
        raise ValueError(f"expected a 2d point, got shape {arr.shape}")
    if not (arr[1] >= 0.0 if allow_boundary else arr[1] > 0.0):
        raise ValueError(f"half-plane point needs x2 > 0, got x2={arr[1]}")
    return arr


def gauss_legendre_panels(a, b, n_panels, n_nodes):
    """Composite Gauss-Legendre nodes/weights on [a, b] split into equal panels."""
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    edges = np.linspace(a, b, n_panels + 1)
    mid = 0.5 * (edges[:-1] + edges[1:])
    half = 0.5 * (edges[1:] - edges[:-1])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights
