"""Discretized fiber operators, dispersion curves, and bulk-edge quantities.

The edge-momentum fiber of the magnetic half-plane Dirac operator is the
half-line operator

    [[0, (xi + b t) - d/dt], [(xi + b t) + d/dt, 0]],   psi2(0) = gamma psi1(0).

Discretization is a staggered two-grid scheme: psi1 lives on the nodes j*h,
psi2 on the midpoints (j+1/2)*h, and both the derivative and the mass
coupling are centered 2nd-order stencils between the two grids.  Staggering
keeps the spectrum free of spurious lattice doublers (a naive one-grid
centered difference produces a second copy of every Landau level), the
matrix is real symmetric tridiagonal in position-interleaved ordering, and
the boundary condition enters through ghost-midpoint elimination in the
first node row.  The whole-line version (no boundary) gives the bulk
reference: relativistic Landau levels +/- sqrt(2 b n).
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .core import BoundaryParam

__all__ = [
    "FiberDiscretization",
    "DispersionData",
    "GapWindow",
    "discretize_fiber",
    "landau_levels",
    "dispersion_curves",
    "edge_conductance",
    "bulk_ids",
    "ids_derivative",
    "assembled_bulk_diagonal",
    "edge_density_rho",
    "combes_thomas_check",
    "gap_window",
]


@dataclass
class FiberDiscretization:
    """Assembled symmetric tridiagonal fiber matrix plus interpretation data.

    DOF ordering interleaves the two staggered grids by position:
    index 2j = psi1 at t_j, index 2j+1 = psi2 at t_j + h/2.  For the
    half-line the first node carries a half-cell metric weight; `diag` and
    `off` store the metric-normalized (plain symmetric) matrix.
    """

    h: float
    T_dom: float
    gamma: float | None          # None = whole line
    xi: float
    b: float
    diag: np.ndarray
    off: np.ndarray
    grid: np.ndarray             # psi1 node positions t_j

    @property
    def half_line(self):
        return self.gamma is not None

    @property
    def dim(self):
        return self.diag.size

    def dense(self):
        return np.diag(self.diag) + np.diag(self.off, 1) + np.diag(self.off, -1)

    @property
    def coords(self):
        """Position of each DOF (midpoint DOFs sit at t_j + h/2)."""
        c = np.empty(self.dim)
        c[0::2] = self.grid
        c[1::2] = self.grid[:-1] + self.h / 2.0
        return c

    def eigenvalues(self, emin=None, emax=None):
        if emin is None:
            return scipy.linalg.eigh_tridiagonal(self.diag, self.off, eigvals_only=True)
        return scipy.linalg.eigh_tridiagonal(
            self.diag, self.off, select="v", select_range=(emin, emax), eigvals_only=True
        )

    def raw_eigensystem(self, emin=None, emax=None):
        if emin is None:
            return scipy.linalg.eigh_tridiagonal(self.diag, self.off)
        return scipy.linalg.eigh_tridiagonal(
            self.diag, self.off, select="v", select_range=(emin, emax)
        )

    def eigensystem(self, emin=None, emax=None):
        """Eigenvalues and spinors interpolated to the psi1 node grid.

        Returns (E, psi) with psi of shape (n_nodes, 2, n_eigs) in physical
        coordinates: the half-cell boundary metric is undone and the
        midpoint component is averaged (ends: one-sided 2nd-order
        extrapolation) onto the nodes.
        """
        E, V = self.raw_eigensystem(emin, emax)
        n = self.grid.size
        psi = np.empty((n, 2, E.size))
        psi[:, 0, :] = V[0::2]
        if self.half_line:
            psi[0, 0, :] *= np.sqrt(2.0)
        mid = V[1::2]
        psi[1:-1, 1, :] = 0.5 * (mid[:-1] + mid[1:])
        psi[0, 1, :] = 1.5 * mid[0] - 0.5 * mid[1]
        psi[-1, 1, :] = 1.5 * mid[-1] - 0.5 * mid[-2]
        return E, psi


def discretize_fiber(gamma, xi, b, h=None, T_dom=None, whole_line=False):
    """Build the discretized fiber operator at edge momentum xi.

    gamma is ignored for whole_line=True.  T_dom defaults to a domain
    covering the orbit center -xi/b with margin 6/sqrt(b); h defaults to
    the coarsest step satisfying b*T_dom*h < 0.1.
    """
    b = float(b)
    if b <= 0:
        raise ValueError(f"flux density b must be positive, got {b}")
    xi = float(xi)
    margin = 6.0 / np.sqrt(b)
    center = -xi / b
    if whole_line:
        if T_dom is None:
            T_dom = 2 * margin
        if T_dom / 2.0 < margin - 1e-12:
            raise ValueError(f"domain too small: need T_dom >= {2 * margin:.3f}")
        t0 = center - T_dom / 2.0
    else:
        needed = max(center + margin, margin)
        if T_dom is None:
            T_dom = needed
        if T_dom < needed - 1e-12:
            raise ValueError(f"domain too small for xi={xi}: need T_dom >= {needed:.3f}")
        t0 = 0.0
    if h is None:
        h = min(1.0 / 48, 0.09 / (b * T_dom))
    h = float(h)
    if b * T_dom * h >= 0.1:
        raise ValueError(
            f"grid too coarse: b*T_dom*h = {b * T_dom * h:.3f} >= 0.1; decrease h"
        )
    n = int(round(T_dom / h)) + 1          # psi1 nodes
    t = t0 + h * np.arange(n)
    m_mid = xi + b * (t[:-1] + h / 2.0)    # mass at the n-1 midpoints
    c = 1.0 / h
    N = 2 * n - 1
    diag = np.zeros(N)
    off = np.empty(N - 1)
    off[0::2] = 0.5 * m_mid - c            # psi1_j ~ psi2_{j+1/2}
    off[1::2] = 0.5 * m_mid + c            # psi2_{j+1/2} ~ psi1_{j+1}

    if whole_line:
        return FiberDiscretization(h, T_dom, None, xi, b, diag, off, t)

    g = gamma.gamma if isinstance(gamma, BoundaryParam) else BoundaryParam(gamma).gamma
    # boundary node: ghost midpoint at -h/2 eliminated via
    # (psi2(-h/2)+psi2(h/2))/2 = gamma*psi1(0); the node carries a half-cell
    # metric weight, normalized here by scaling DOF 0 with sqrt(2)
    diag[0] = g * (2.0 * c - b * h / 2.0)
    off[0] *= np.sqrt(2.0)
    return FiberDiscretization(h, T_dom, g, xi, b, diag, off, t)


def landau_levels(b, n_max, h=None, T_dom=None):
    """Nonnegative whole-line fiber eigenvalues up to level n_max."""
    fib = discretize_fiber(None, 0.0, b, h=h, T_dom=T_dom, whole_line=True)
    emax = np.sqrt(2.0 * b * n_max) + np.sqrt(b)
    E = fib.eigenvalues(-0.4 * np.sqrt(b), emax)
    return np.sort(E)[: n_max + 1]


@dataclass
class DispersionData:
    xi_grid: np.ndarray
    branches: np.ndarray         # (n_branch, n_xi), NaN where a branch is absent
    labels: list = field(default_factory=list)


def dispersion_curves(gamma, b, xi_grid, n_branches, h=None, overlap_min=0.9):
    """Fiber eigenvalue branches E_n(xi), matched by eigenvector overlap.

    Branch identities follow the eigenvectors between neighboring xi values;
    an overlap below overlap_min raises with diagnostics.  Branches cover the
    energy window of the first n_branches Landau levels on both sides.
    """
    xi_grid = np.asarray(xi_grid, dtype=float)
    emax = np.sqrt(2.0 * b * n_branches) + 0.8 * np.sqrt(b)
    T_dom = max(np.max(-xi_grid / b), 0.0) + 6.0 / np.sqrt(b)
    tracks = []                  # dicts: start index, values list, last vector
    active = []
    for k, xi in enumerate(xi_grid):
        fib = discretize_fiber(gamma, xi, b, h=h, T_dom=T_dom)
        E, V = fib.raw_eigensystem(-emax, emax)
        if k == 0 or not active:
            for j in range(E.size):
                tracks.append({"start": k, "values": [E[j]], "vec": V[:, j]})
        else:
            vec_prev = np.stack([tr["vec"] for tr in active], axis=1)
            ov = np.abs(vec_prev.T @ V)
            taken = np.full(E.size, False)
            # greedy assignment by descending overlap; tracks whose state has
            # drifted out of the energy window are allowed to retire
            order_rc = np.dstack(np.unravel_index(np.argsort(-ov, axis=None), ov.shape))[0]
            matched = np.full(len(active), False)
            for trow, j in order_rc:
                if matched[trow] or taken[j] or ov[trow, j] < overlap_min:
                    continue
                matched[trow] = True
                taken[j] = True
                active[trow]["values"].append(E[j])
                active[trow]["vec"] = V[:, j]
            # near-degenerate levels (bulk plateaus) rotate inside their
            # eigenspace; accept a match when the overlap with the remaining
            # unmatched subspace is large even if no single vector dominates
            for trow in np.where(~matched)[0]:
                free = np.where(~taken)[0]
                if free.size and np.sqrt(np.sum(ov[trow] ** 2)) >= overlap_min:
                    j = free[int(np.argmax(ov[trow, free]))]
                    matched[trow] = True
                    taken[j] = True
                    active[trow]["values"].append(E[j])
                    active[trow]["vec"] = V[:, j]
            edge_margin = 0.5 * np.sqrt(b)
            for trow in np.where(~matched)[0]:
                last = active[trow]["values"][-1]
                if abs(last) < emax - edge_margin:
                    best = float(np.max(ov[trow])) if ov.shape[1] else 0.0
                    raise RuntimeError(
                        f"branch matching failed at xi={xi:.4f} (branch at E="
                        f"{last:.4f}): best overlap {best:.3f} (threshold "
                        f"{overlap_min}); refine the xi grid"
                    )
            for j in np.where(~taken)[0]:
                tracks.append({"start": k, "values": [E[j]], "vec": V[:, j]})
        active = [tr for tr in tracks if tr["start"] + len(tr["values"]) == k + 1]
    branches = np.full((len(tracks), xi_grid.size), np.nan)
    for i, tr in enumerate(tracks):
        branches[i, tr["start"] : tr["start"] + len(tr["values"])] = tr["values"]
    order = np.argsort([np.nanmean(br) for br in branches])
    return DispersionData(xi_grid, branches[order], labels=[f"E{i}" for i in range(len(tracks))])


@dataclass(frozen=True)
class GapWindow:
    """Energies e1 < e2 < e3 < e4 with [e1,e2] and [e3,e4] inside bulk gaps.

    The plateau window [e2, e3] contains the Landau levels being counted; the
    flanks are where a switch function rises and falls.
    """

    e1: float
    e2: float
    e3: float
    e4: float

    def __post_init__(self):
        if not (self.e1 < self.e2 < self.e3 < self.e4):
            raise ValueError(
                f"window energies must increase: {self.e1}, {self.e2}, {self.e3}, {self.e4}"
            )


def gap_window(b, n_below, n_above):
    """Window whose plateau covers Landau levels -sqrt(2b*n_below) through
    +sqrt(2b*n_above); the gaps span 10%..90% of the adjacent level spacings."""
    lev = lambda n: np.sqrt(2.0 * b * n)
    lo_in, lo_out = -lev(n_below), -lev(n_below + 1)
    hi_in, hi_out = lev(n_above), lev(n_above + 1)
    e1 = lo_in - 0.9 * (lo_in - lo_out)
    e2 = lo_in - 0.1 * (lo_in - lo_out)
    e3 = hi_in + 0.1 * (hi_out - hi_in)
    e4 = hi_in + 0.9 * (hi_out - hi_in)
    return GapWindow(e1, e2, e3, e4)


def _spectral_flow(dispersion, e, slope_tol):
    """Signed count of dispersion-branch crossings of the energy e."""
    total = 0
    for br in dispersion.branches:
        vals = br[np.isfinite(br)]
        s = np.sign(vals - e)
        if np.any(s == 0):
            raise RuntimeError(f"branch exactly touches e={e}; choose a different e")
        for k in np.where(s[:-1] * s[1:] < 0)[0]:
            de = vals[k + 1] - vals[k]
            if abs(de) < slope_tol:
                raise RuntimeError(
                    f"crossing tangent to e={e} (|dE|={abs(de):.2e}); choose a different e"
                )
            total += 1 if de > 0 else -1
    return int(total)


def edge_conductance(dispersion, window, e, slope_tol=1e-6):
    """Edge conductance of the window: net signed spectral flow.

    e must lie inside one of the window's gaps [e1,e2] or [e3,e4]; the
    result is the flow through the upper gap minus the flow through the
    lower gap (the other gap is probed at its center), i.e. the signed
    number of edge branches entering the plateau window, an integer
    independent of e within the gap.  Near-tangent crossings raise.
    """
    if window.e1 <= e <= window.e2:
        e_low, e_up = e, 0.5 * (window.e3 + window.e4)
    elif window.e3 <= e <= window.e4:
        e_low, e_up = 0.5 * (window.e1 + window.e2), e
    else:
        raise ValueError(f"energy {e} is not inside a gap of the window")
    return _spectral_flow(dispersion, e_up, slope_tol) - _spectral_flow(
        dispersion, e_low, slope_tol
    )


def bulk_ids(b, window, h=None):
    """Integrated density of states of the bulk window projection.

    I_inf(b) = (1/2pi) * integral over xi of the diagonal of the spectral
    projection of the whole-line fiber.  The fiber at momentum xi is the
    translate of the fiber at 0 by -xi/b, so the xi-integral telescopes to
    b/(2pi) times the number of levels in the plateau window [e2, e3]; the
    reduction is exact up to the exponentially small domain truncation
    (verified directly by assembled_bulk_diagonal).
    """
    fib = discretize_fiber(None, 0.0, b, h=h, whole_line=True)
    E = fib.eigenvalues(window.e2 - 2.0, window.e3 + 2.0)
    guard = 10.0 * fib.h**2 * max(1.0, b)
    if np.any((np.abs(E - window.e2) < guard) | (np.abs(E - window.e3) < guard)):
        raise ValueError(
            f"a level sits on the window edge (within {guard:.2e}); adjust the window"
        )
    count = int(np.sum((E > window.e2) & (E < window.e3)))
    return b * count / (2.0 * np.pi)


def ids_derivative(b, window, db=None, h=None):
    """Central-difference derivative of bulk_ids in b (default db = b/100)."""
    if db is None:
        db = b / 100.0
    return (bulk_ids(b + db, window, h=h) - bulk_ids(b - db, window, h=h)) / (2.0 * db)


def assembled_bulk_diagonal(b, window, x2_values, h=None, dxi=None):
    """Diagonal of the bulk window projection assembled by xi-integration.

    Evaluates (1/2pi) int dxi tr P_xi(x2, x2) for the whole-line fiber.
    The fiber at momentum xi is the exact grid translate of the fiber at 0
    by -xi/b, so the density profile is solved once and the xi-integral is
    a trapezoid sum over translated copies; translation covariance makes
    the result constant in x2, which is what the caller checks.  The xi
    spacing is snapped to a multiple of b*h so the translates stay aligned
    with the grid.
    """
    x2_values = np.asarray(x2_values, dtype=float)
    fib = discretize_fiber(None, 0.0, b, h=h, whole_line=True)
    E, psi = fib.eigensystem(emin=window.e2, emax=window.e3)
    if E.size == 0:
        return np.zeros(x2_values.size)
    dens = np.sum(np.abs(psi) ** 2, axis=(1, 2)) / fib.h
    # node interpolation of the staggered component loses O(h^2) mass;
    # restore the exact projection trace (= number of levels)
    dens *= E.size / np.trapezoid(dens, fib.grid)
    if dxi is None:
        dxi = 0.05 * np.sqrt(b)
    step = fib.h * max(1, int(round(dxi / (b * fib.h))))   # translate distance
    glo, ghi = fib.grid[0], fib.grid[-1]
    acc = np.zeros(x2_values.size)
    for i, x2 in enumerate(x2_values):
        # arguments x2 + xi/b sweeping the profile support
        pts = np.arange(glo + ((x2 - glo) % step), ghi, step)
        acc[i] = np.sum(np.interp(pts, fib.grid, dens, left=0.0, right=0.0))
    return b * step * acc / (2.0 * np.pi)


def edge_density_rho(gamma, b, F, L, h=None, dxi=None, tail_tol=1e-4):
    """Edge density (1/(2 pi L)) int dxi int_0^L tr F(fiber)(t,t) dt.

    F is a vectorized callable on energies; the fiber functional calculus is
    by eigendecomposition.  If F exposes a support_max attribute, only
    eigenpairs with |E| <= support_max are computed.  The xi-range grows
    until the added tail falls below tail_tol, else an error is raised.
    """
    g = gamma.gamma if isinstance(gamma, BoundaryParam) else BoundaryParam(gamma).gamma
    L = float(L)
    if dxi is None:
        dxi = 0.1 * np.sqrt(b)
    span = 6.0 / np.sqrt(b)
    T_dom = L + 2 * span
    emax = getattr(F, "support_max", None)

    def integrand(xi):
        # tail momenta push the orbit center beyond L; grow the domain with it
        fib = discretize_fiber(g, xi, b, h=h, T_dom=max(T_dom, -xi / b + span))
        if emax is None:
            E, psi = fib.eigensystem()
        else:
            E, psi = fib.eigensystem(emin=-emax, emax=emax)
        if E.size == 0:
            return 0.0
        vals = np.asarray(F(E))
        n_in = int(round(L / fib.h)) + 1
        dens = np.einsum("tse,e->t", np.abs(psi[:n_in]) ** 2, vals) / fib.h
        w = np.full(n_in, fib.h)
        w[0] = w[-1] = fib.h / 2.0
        return float(w @ dens)

    lo, hi = -b * (L + span), b * span
    xs = np.arange(lo, hi + dxi / 2, dxi)
    total = np.sum([integrand(x) for x in xs]) * dxi
    for _ in range(6):
        new_lo = np.arange(lo - b * span, lo, dxi)
        new_hi = np.arange(hi + dxi, hi + b * span + dxi / 2, dxi)
        tail = (np.sum([integrand(x) for x in new_lo])
                + np.sum([integrand(x) for x in new_hi])) * dxi
        total += tail
        lo, hi = lo - b * span, hi + b * span + dxi
        if abs(tail) < tail_tol * max(abs(total), 1.0):
            return total / (2.0 * np.pi * L)
    raise RuntimeError(f"xi-integration tail did not converge (last tail {tail:.2e})")


def combes_thomas_check(H, z, C1, x0):
    """Measured weighted-resolvent norm versus the Combes-Thomas bound.

    H is a FiberDiscretization or a pair (hermitian matrix, coordinates).
    Returns (measured, bound) with bound = (1-C1)^(-1) |Im z|^(-1); the
    weight is exp(C1 |Im z| sqrt(1 + (t - x0)^2)) per grid point.
    """
    if not (0.0 < C1 < 1.0):
        raise ValueError(f"C1 must lie in (0,1), got {C1}")
    if isinstance(H, FiberDiscretization):
        mat = H.dense()
        coords = H.coords
    else:
        mat, coords = H
        mat = np.asarray(mat)
        coords = np.asarray(coords, dtype=float)
    v = z.v
    expo = C1 * abs(v) * np.sqrt(1.0 + (coords - x0) ** 2)
    if np.max(expo) > 650.0:
        raise OverflowError(
            "exponential weight overflows; use a smaller C1 or a smaller domain"
        )
    w = np.exp(expo)
    A = np.linalg.solve(mat - z.z * np.eye(mat.shape[0]), np.diag(1.0 / w))
    A = w[:, None] * A
    measured = float(np.linalg.norm(A, ord=2))
    bound = 1.0 / ((1.0 - C1) * abs(v))
    return measured, bound
