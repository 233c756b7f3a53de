"""Half-plane Green's function: bulk part plus the boundary-reflected term.

The reflected ("edge") term is an oscillatory momentum integral.  It is
evaluated two ways: on a deformed hyperbolic contour (works for all
separations, including points far apart along the boundary) and by direct
quadrature in the original variable (usable only when the distance to the
mirrored point is not too small; serves as an oracle for the contour route).
"""

from dataclasses import dataclass, field

import numpy as np

from .core import (
    SIGMA_1,
    BoundaryParam,
    DiagonalKernelError,
    QuadratureError,
    as_halfplane_array,
    gauss_legendre_panels,
    sup_norm,
)
from .closed_form import bulk_plane_kernel

__all__ = [
    "EdgeGeometry",
    "ContourConfig",
    "DecayFit",
    "SampledKernel",
    "edge_F",
    "edge_F_batch",
    "edge_F_direct",
    "halfplane_kernel",
    "halfplane_kernel_batch",
    "fit_decay",
    "zigzag_zero_mode",
]


@dataclass(frozen=True)
class EdgeGeometry:
    """Separation along the edge S = x1 - x1' and mirrored height T = x2 + x2'."""

    S: float
    T: float

    def __post_init__(self):
        if not (self.T > 0.0):
            raise ValueError(f"mirrored height T must be positive, got {self.T}")

    @property
    def r(self):
        return float(np.hypot(self.S, self.T))

    @property
    def theta(self):
        return float(np.arctan2(self.S, self.T))


def default_epsilon(theta):
    """Deformation angle: half the margin to the contour limit, clamped."""
    eps = min(0.5, (np.pi / 2 - abs(theta)) / 2 + 0.1)
    return float(np.clip(eps, 0.05, np.pi / 2 - 0.05))


@dataclass(frozen=True)
class ContourConfig:
    epsilon: float | None = None   # None = adaptive per point
    nodes_per_panel: int = 12
    panel_width: float = 0.5
    tol: float = 1e-10
    max_refinements: int = 6

    def __post_init__(self):
        if self.epsilon is not None and not (0.0 < self.epsilon < np.pi / 2):
            raise ValueError(f"epsilon must lie in (0, pi/2), got {self.epsilon}")
        if self.nodes_per_panel < 4:
            raise ValueError("need at least 4 nodes per panel")


@dataclass(frozen=True)
class DecayFit:
    """Fitted exponential decay |K| ~ C_hat * exp(-c_hat*lam*r)/r."""

    c_hat: float
    C_hat: float
    residual: float


@dataclass
class SampledKernel:
    """Kernel values on a grid of point pairs, with the defining parameters."""

    points: np.ndarray          # (n, 2) source points x
    points_prime: np.ndarray    # (n, 2) target points x'
    values: np.ndarray          # (n, 2, 2) complex kernel values
    meta: dict = field(default_factory=dict)


def _truncation(r_eff, budget=37.0):
    """x_max with exp(-r_eff*cosh(x)+|x|) below exp(-budget)."""
    x = np.arccosh(max(budget / r_eff, 1.0) + 1.0)
    for _ in range(3):
        x = np.arccosh(max((budget + x) / r_eff, 1.0) + 1.0)
    return max(x, 1.0)


def _contour_integrand(gamma, theta_eps, eps, r, x):
    """Shifted-contour integrand at nodes x; r, theta_eps may be arrays.

    Broadcast shape: r/theta_eps with trailing node axis.  Also enforces the
    denominator-distance bound that keeps the reflection factor regular.
    """
    g = gamma.gamma
    w = x + 1j * theta_eps
    ew = np.exp(w)
    dist = np.abs(ew - 1j / g)
    bound = np.sin(eps) / g
    if np.any(dist < bound * (1.0 - 1e-9)):
        raise FloatingPointError(
            "contour node violates the denominator safety bound; "
            "the deformation angle is inconsistent with the geometry"
        )
    coeff = (g + 1j * ew) / (1.0 + 1j * g * ew)
    expo = np.exp(-r * np.cosh(x - 1j * eps))
    out = np.empty(np.shape(ew) + (2, 2), dtype=complex)
    out[..., 0, 0] = 1j
    out[..., 1, 1] = 1j
    out[..., 0, 1] = ew
    out[..., 1, 0] = -1.0 / ew
    return (coeff * expo)[..., None, None] * out


def edge_F(geom, gamma, cfg=None):
    """Reflected-term matrix F(S, T) by quadrature on the deformed contour.

    Refines by doubling the panel count until successive estimates agree to
    cfg.tol entrywise; raises QuadratureError (with both iterates) otherwise.
    """
    if not isinstance(gamma, BoundaryParam):
        gamma = BoundaryParam(gamma)
    cfg = cfg or ContourConfig()
    r, theta = geom.r, geom.theta
    eps = cfg.epsilon if cfg.epsilon is not None else default_epsilon(theta)
    theta_eps = theta - eps
    x_max = _truncation(r * np.cos(eps))
    n_panels = max(8, int(np.ceil(2 * x_max / cfg.panel_width)))

    prev = None
    for _ in range(cfg.max_refinements + 1):
        nodes, weights = gauss_legendre_panels(-x_max, x_max, n_panels, cfg.nodes_per_panel)
        vals = _contour_integrand(gamma, theta_eps, eps, r, nodes)
        est = np.einsum("nab,n->ab", vals, weights)
        if prev is not None and sup_norm(est - prev) < cfg.tol * max(1.0, sup_norm(est)):
            return est
        prev = est
        n_panels *= 2
    raise QuadratureError(
        "contour quadrature did not converge", last=est, previous=prev
    )


def edge_F_batch(S, T, gamma, epsilon=0.3, nodes_per_panel=12, panel_width=0.4):
    """Vectorized edge_F over arrays of (S, T) with a shared node grid.

    Uses one deformation angle and one truncation (from the smallest r in the
    batch), so all points share the quadrature nodes.  Intended for the inner
    loops of kernel composition; accuracy is limited by the fixed grid but is
    well below composition tolerances.
    """
    if not isinstance(gamma, BoundaryParam):
        gamma = BoundaryParam(gamma)
    S = np.asarray(S, dtype=float)
    T = np.asarray(T, dtype=float)
    if np.any(T <= 0):
        raise ValueError("all mirrored heights T must be positive")
    r = np.hypot(S, T)
    theta = np.arctan2(S, T)
    theta_eps = theta - epsilon
    x_max = _truncation(float(np.min(r)) * np.cos(epsilon))
    n_panels = max(8, int(np.ceil(2 * x_max / panel_width)))
    nodes, weights = gauss_legendre_panels(-x_max, x_max, n_panels, nodes_per_panel)
    vals = _contour_integrand(
        gamma, theta_eps[..., None], epsilon, r[..., None], nodes
    )
    return np.einsum("...nab,n->...ab", vals, weights)


def edge_F_direct(geom, gamma, tol=1e-10):
    """Reflected-term matrix by direct quadrature in the momentum variable.

    Only valid for T >= 0.1: the integrand decays like exp(-<xi>*T), so for
    small T the truncation needed is impractically large; use edge_F there.
    """
    if not isinstance(gamma, BoundaryParam):
        gamma = BoundaryParam(gamma)
    if geom.T < 0.1:
        raise ValueError(
            f"direct quadrature needs T >= 0.1 (got T={geom.T}); use edge_F instead"
        )
    g = gamma.gamma
    S, T = geom.S, geom.T
    xi_max = (-np.log(tol) + 5.0) / T + 10.0

    def estimate(n_panels, nodes_per_panel=12):
        xi, w = gauss_legendre_panels(-xi_max, xi_max, n_panels, nodes_per_panel)
        br = np.sqrt(1.0 + xi**2)
        s = br + xi
        coeff = (g + 1j * s) / (1.0 + 1j * g * s)
        phase = np.exp(1j * xi * S - br * T)
        mat = np.empty((xi.size, 2, 2), dtype=complex)
        mat[:, 0, 0] = 1j / br
        mat[:, 1, 1] = 1j / br
        mat[:, 0, 1] = xi / br + 1.0
        mat[:, 1, 0] = xi / br - 1.0
        return np.einsum("n,nab,n->ab", coeff * phase, mat, w)

    # resolve both the oscillation (period 2pi/|S|) and the decay scale
    n0 = max(16, int(np.ceil(2 * xi_max * max(abs(S), 1.0) / 3.0)))
    prev = None
    est = None
    for _ in range(8):
        est = estimate(n0)
        if prev is not None and sup_norm(est - prev) < tol * max(1.0, sup_norm(est)):
            return est
        prev = est
        n0 *= 2
    raise QuadratureError("direct quadrature did not converge", last=est, previous=prev)


def halfplane_kernel(gamma, lam, x, xprime, cfg=None):
    """Half-plane resolvent kernel at energy i*lam, lam > 0.

    Evaluated by rescaling to lam = 1: K = lam * [bulk(lam*dx) + edge term],
    where the edge term is F(lam*S, lam*T) sigma_1 / (4 pi).
    """
    if not isinstance(gamma, BoundaryParam):
        gamma = BoundaryParam(gamma)
    lam = float(lam)
    if lam <= 0:
        raise ValueError(f"lam must be positive, got {lam}")
    # closure points x2 = 0 are allowed (needed to inspect the boundary trace)
    xa = as_halfplane_array(x, allow_boundary=True)
    xb = as_halfplane_array(xprime, allow_boundary=True)
    if np.array_equal(xa, xb):
        raise DiagonalKernelError("half-plane kernel is singular at x = x'")
    if xa[1] + xb[1] <= 0.0:
        raise ValueError("at least one of x2, x2' must be positive")
    bulk = bulk_plane_kernel(1.0, lam * (xa - xb))
    geom = EdgeGeometry(S=lam * (xa[0] - xb[0]), T=lam * (xa[1] + xb[1]))
    edge = edge_F(geom, gamma, cfg) @ SIGMA_1 / (4.0 * np.pi)
    return lam * (bulk + edge)


def halfplane_kernel_batch(gamma, lam, X, Xp, epsilon=0.3):
    """Vectorized half-plane kernel over matched point arrays of shape (n, 2)."""
    if not isinstance(gamma, BoundaryParam):
        gamma = BoundaryParam(gamma)
    X = np.asarray(X, dtype=float)
    Xp = np.asarray(Xp, dtype=float)
    dx = lam * (X - Xp)
    bulk = bulk_plane_kernel(1.0, dx)
    S = lam * (X[..., 0] - Xp[..., 0])
    T = lam * (X[..., 1] + Xp[..., 1])
    edge = edge_F_batch(S, T, gamma, epsilon=epsilon) @ SIGMA_1 / (4.0 * np.pi)
    return lam * (bulk + edge)


def fit_decay(samples, lam, fixed_rate=None):
    """Fit |K(x,x')| * |x-x'| ~ C_hat * exp(-c_hat * lam * |x-x'|).

    samples: iterable of (x, xprime, matrix).  With fixed_rate set, the rate
    is pinned and C_hat is the smallest prefactor that bounds every sample
    (an empirical bound constant); otherwise both are fitted by least squares
    and the residual is sqrt(1 - R^2) of the linear fit in log space.
    """
    rs, ys = [], []
    for x, xprime, mat in samples:
        xa = as_halfplane_array(x)
        xb = as_halfplane_array(xprime)
        r = float(np.linalg.norm(xa - xb))
        rs.append(r)
        ys.append(np.log(sup_norm(mat) * r))
    rs = np.asarray(rs)
    ys = np.asarray(ys)
    if rs.size < 20:
        raise ValueError(f"need at least 20 samples, got {rs.size}")
    if np.max(rs) / np.min(rs) < 10.0:
        raise ValueError("separations must span at least one decade")
    if fixed_rate is not None:
        excess = ys + fixed_rate * lam * rs
        return DecayFit(
            c_hat=float(fixed_rate),
            C_hat=float(np.exp(np.max(excess))),
            residual=float(np.std(excess)),
        )
    slope, intercept = np.polyfit(lam * rs, ys, 1)
    pred = slope * lam * rs + intercept
    ss_res = float(np.sum((ys - pred) ** 2))
    ss_tot = float(np.sum((ys - np.mean(ys)) ** 2))
    if ss_tot == 0.0:
        raise ValueError("degenerate sample spread: all magnitudes identical")
    return DecayFit(
        c_hat=float(-slope),
        C_hat=float(np.exp(intercept)),
        residual=float(np.sqrt(max(ss_res / ss_tot, 0.0))),
    )


def zigzag_zero_mode(x, xprime):
    """Shape of the zigzag zero-mode projector kernel (up to a constant).

    Returns 1 / (i(x1-x1') + (x2+x2'))^2; diverges like (2 x2)^-2 as both
    points approach the same boundary location.
    """
    xa = np.asarray(x, dtype=float)
    xb = np.asarray(xprime, dtype=float)
    denom = 1j * (xa[0] - xb[0]) + (xa[1] + xb[1])
    if denom == 0:
        raise ValueError("zigzag zero-mode kernel undefined at mirrored coincidence")
    return 1.0 / denom**2
