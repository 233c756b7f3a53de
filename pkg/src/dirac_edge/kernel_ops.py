"""Composition of singular kernels and the Born series for D + W.

Kernels here are batch callables K(X, Y) -> (n, 2, 2) on matched point arrays.
Compositions integrate over the half-plane with polar quadrature around each
singular center (the radial weight cancels the |y - center|^-1 singularity);
the domain is split along the perpendicular bisector of the two centers so
each patch contains exactly one singularity.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import k1

from .core import (
    PAULI,
    SIGMA_1,
    BoundaryParam,
    QuadratureError,
    sup_norm,
)
from .edge_kernel import edge_F_batch, halfplane_kernel_batch

__all__ = [
    "PotentialField",
    "CompositionPlan",
    "ComposedValue",
    "BornResult",
    "resolvent_kernel",
    "compose2",
    "compose3",
    "born_series",
    "low_lambda_form",
]

# each kernel point expands to a few hundred contour nodes; keep chunks small
_CHUNK = 2000


@dataclass(frozen=True)
class PotentialField:
    """Bounded Hermitian potential W(x) = w0*I + sum_j wj*sigma_j.

    The component functions take a point array (n, 2) and return real values
    of shape (n,).  sup_norm is the recorded L-infinity bound of the matrix
    norm |w0| + |w_vec|; it must dominate the sampled values.
    """

    w0: callable
    w1: callable
    w2: callable
    w3: callable
    sup_norm: float

    def __post_init__(self):
        if not (self.sup_norm >= 0.0 and np.isfinite(self.sup_norm)):
            raise ValueError(f"sup_norm must be a finite nonnegative real, got {self.sup_norm}")

    @classmethod
    def zero(cls):
        z = lambda Y: np.zeros(np.asarray(Y).shape[:-1])
        return cls(z, z, z, z, 0.0)

    @classmethod
    def constant(cls, w0=0.0, w1=0.0, w2=0.0, w3=0.0):
        def const(c):
            return lambda Y: np.full(np.asarray(Y).shape[:-1], float(c))

        bound = abs(w0) + float(np.sqrt(w1**2 + w2**2 + w3**2))
        return cls(const(w0), const(w1), const(w2), const(w3), bound)

    def __call__(self, Y):
        Y = np.asarray(Y, dtype=float)
        out = np.zeros(Y.shape[:-1] + (2, 2), dtype=complex)
        v0 = np.asarray(self.w0(Y))
        out[..., 0, 0] = v0
        out[..., 1, 1] = v0
        for wf, sig in zip((self.w1, self.w2, self.w3), PAULI):
            v = np.asarray(wf(Y))
            out += v[..., None, None] * sig
        return out

    def pointwise_bound(self, Y):
        """|w0| + |w_vec| at each point; equals the matrix operator norm."""
        Y = np.asarray(Y, dtype=float)
        vec = np.sqrt(
            np.asarray(self.w1(Y)) ** 2
            + np.asarray(self.w2(Y)) ** 2
            + np.asarray(self.w3(Y)) ** 2
        )
        return np.abs(np.asarray(self.w0(Y))) + vec


@dataclass(frozen=True)
class CompositionPlan:
    """Quadrature layout for one composed evaluation.

    The domain is cut along the perpendicular bisector of the two singular
    centers; each half is integrated in polar coordinates about its center
    with dyadically graded radial panels (finest near the singularity).
    """

    singular_centers: tuple
    split_radius: float
    n_angular: int = 32
    radial_nodes: int = 10
    radial_panels: int = 10
    trunc_radius: float = 20.0
    min_radius: float = 0.0
    tol: float = 2e-4
    max_refinements: int = 3
    tail_estimate: float = 1e-9

    @classmethod
    def for_pair(cls, x, xprime, lam=1.0, **kw):
        x = np.asarray(x, dtype=float)
        xprime = np.asarray(xprime, dtype=float)
        d = float(np.linalg.norm(x - xprime))
        trunc = d + 20.0 / lam
        # tail of exp(-lam * distance) beyond the truncation circle
        tail = float(np.exp(-lam * trunc + lam * d) * trunc)
        kw.setdefault("trunc_radius", trunc)
        kw.setdefault("tail_estimate", max(tail * 1e-6, 1e-12))
        return cls((tuple(x), tuple(xprime)), d / 2.0, **kw)


@dataclass(frozen=True)
class ComposedValue:
    value: np.ndarray
    error: float


@dataclass(frozen=True)
class BornResult:
    value: np.ndarray
    tail_bound: float
    error: float


def resolvent_kernel(gamma, lam, epsilon=0.3):
    """Batch kernel callable for the free half-plane resolvent at energy i*lam."""
    if not isinstance(gamma, BoundaryParam):
        gamma = BoundaryParam(gamma)
    lam = float(lam)

    def K(X, Y):
        X = np.asarray(X, dtype=float)
        Y = np.asarray(Y, dtype=float)
        n = X.shape[0]
        out = np.empty((n, 2, 2), dtype=complex)
        # sort by mirrored distance so each chunk shares a contour truncation
        # adapted to its own scale (smallest r in a chunk sets the grid size)
        r = np.hypot(X[:, 0] - Y[:, 0], X[:, 1] + Y[:, 1])
        order = np.argsort(r)
        Xs, Ys = X[order], Y[order]
        res = np.empty((n, 2, 2), dtype=complex)
        for i0 in range(0, n, _CHUNK):
            sl = slice(i0, min(i0 + _CHUNK, n))
            res[sl] = halfplane_kernel_batch(gamma, lam, Xs[sl], Ys[sl], epsilon=epsilon)
        out[order] = res
        return out

    K.lam = lam
    K.gamma = gamma
    return K


def _base_edges(n_panels):
    """Dyadically graded panel edges on [0, 1], finest toward 0."""
    return np.concatenate([[0.0], 2.0 ** np.arange(-(n_panels - 1), 1, dtype=float)])


def _refine_edges(edges):
    mids = 0.5 * (edges[:-1] + edges[1:])
    return np.sort(np.concatenate([edges, mids]))


def _patch_nodes(center, other, plan, base_edges, diagonal=False):
    """Quadrature nodes/weights of the polar patch around `center`.

    Radial limit per angle = min(bisector crossing, boundary crossing,
    truncation).  Returns (points (m, 2), weights (m,)); weights include the
    polar Jacobian, so integrands are evaluated plainly at the points.
    """
    pts, wts = _patch_nodes_batch(
        np.asarray(center, dtype=float)[None, :],
        None if diagonal else np.asarray(other, dtype=float)[None, :],
        plan,
        base_edges,
    )
    keep = wts[0] > 0
    return pts[0][keep], wts[0][keep]


def _patch_nodes_batch(centers, others, plan, base_edges):
    """Vectorized polar patches around a batch of centers.

    centers (P, 2); others (P, 2) or None for diagonal (no bisector cut).
    Returns pts (P, m, 2) and wts (P, m); invalid nodes carry weight 0 and
    are relocated to a harmless interior dummy point.
    """
    n_ang = plan.n_angular
    phi = 2.0 * np.pi * (np.arange(n_ang) + 0.5) / n_ang
    e = np.stack([np.cos(phi), np.sin(phi)], axis=1)                 # (A, 2)
    P = centers.shape[0]
    rmax = np.full((P, n_ang), plan.trunc_radius)
    if others is not None:
        d = others - centers                                          # (P, 2)
        ed = d @ e.T                                                  # (P, A)
        dd = np.sum(d * d, axis=1)[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_bis = np.where(ed > 0, dd / (2.0 * np.maximum(ed, 1e-300)), np.inf)
        rmax = np.minimum(rmax, t_bis)
    c2 = centers[:, 1][:, None]
    with np.errstate(divide="ignore"):
        t_bdry = np.where(e[None, :, 1] < 0, -c2 / np.minimum(e[None, :, 1], -1e-300), np.inf)
    rmax = np.minimum(rmax, t_bdry)

    x_gl, w_gl = np.polynomial.legendre.leggauss(plan.radial_nodes)
    mid = 0.5 * (base_edges[:-1] + base_edges[1:])
    half = 0.5 * (base_edges[1:] - base_edges[:-1])
    u = (mid[:, None] + half[:, None] * x_gl[None, :]).ravel()        # (q,)
    wu = (half[:, None] * w_gl[None, :]).ravel()

    t = rmax[..., None] * u[None, None, :]                            # (P, A, q)
    wt = rmax[..., None] * wu[None, None, :] * t * (2.0 * np.pi / n_ang)
    pts = centers[:, None, None, :] + t[..., None] * e[None, :, None, :]
    # dropping the innermost annulus costs O(min_radius) of the integrand
    bad = (t <= plan.min_radius) | (pts[..., 1] <= 0) | ~np.isfinite(t)
    wt = np.where(bad, 0.0, wt)
    pts = np.where(bad[..., None], np.array([0.0, 1.0]), pts)
    m = n_ang * u.size
    return pts.reshape(P, m, 2), wt.reshape(P, m)


def _composed_estimate(K1, W, K2, x, xprime, plan, base_edges):
    diagonal = bool(np.array_equal(x, xprime))
    pts_list, wts_list, side = [], [], []
    p, w = _patch_nodes(x, xprime, plan, base_edges, diagonal=diagonal)
    pts_list.append(p)
    wts_list.append(w)
    if not diagonal:
        p2, w2 = _patch_nodes(xprime, x, plan, base_edges)
        pts_list.append(p2)
        wts_list.append(w2)
    total = np.zeros((2, 2), dtype=complex)
    for pts, wts in zip(pts_list, wts_list):
        if pts.size == 0:
            continue
        Xrep = np.broadcast_to(np.asarray(x, dtype=float), pts.shape)
        Xprep = np.broadcast_to(np.asarray(xprime, dtype=float), pts.shape)
        A = K1(Xrep, pts)
        B = K2(pts, Xprep)
        Wv = W(pts)
        total += np.einsum("n,nab,nbc,ncd->ad", wts, A, Wv, B)
    return total


def compose2(K1, W, K2, x, xprime, plan=None):
    """Evaluate the double-kernel composition (K1 W K2)(x, x').

    Refines both the radial panels (midpoint insertion) and the angular count
    (the radial-limit function has kinks, so angular error must be refined
    too) until two successive estimates agree to plan.tol relative; the
    returned error is the last refinement change plus the truncation tail.
    """
    x = np.asarray(x, dtype=float)
    xprime = np.asarray(xprime, dtype=float)
    if np.array_equal(x, xprime):
        raise ValueError("compose2 requires x != x' (log singularity on the diagonal)")
    if plan is None:
        plan = CompositionPlan.for_pair(x, xprime, lam=getattr(K1, "lam", 1.0))
    if W.sup_norm == 0.0:
        return ComposedValue(np.zeros((2, 2), dtype=complex), 0.0)
    edges = _base_edges(plan.radial_panels)
    cur = plan
    prev = None
    est = None
    for _ in range(plan.max_refinements + 1):
        est = _composed_estimate(K1, W, K2, x, xprime, cur, edges)
        if prev is not None:
            change = sup_norm(est - prev)
            if change < plan.tol * max(1.0, sup_norm(est)):
                return ComposedValue(est, float(change) + plan.tail_estimate)
        prev = est
        edges = _refine_edges(edges)
        cur = replace(cur, n_angular=2 * cur.n_angular)
    raise QuadratureError("kernel composition did not converge", last=est, previous=prev)


def _inner_plan(plan):
    return CompositionPlan(
        plan.singular_centers,
        plan.split_radius,
        n_angular=max(12, plan.n_angular // 2),
        radial_nodes=8,
        radial_panels=max(5, plan.radial_panels // 2),
        trunc_radius=plan.trunc_radius,
        min_radius=max(plan.min_radius, 1e-3),
        tol=plan.tol,
        max_refinements=0,
        tail_estimate=plan.tail_estimate,
    )


def _inner_batch(K2, W2, K3, Ys, xprime, inner, inner_edges):
    """(K2 W2 K3)(y, x') for a batch of outer nodes y, fixed inner grids."""
    P = Ys.shape[0]
    Xp = np.broadcast_to(xprime, Ys.shape)
    G = np.zeros((P, 2, 2), dtype=complex)
    # patch around each y, cut toward x', plus patch around x' cut toward y
    for centers, others in ((Ys, Xp), (Xp, Ys)):
        pts, wts = _patch_nodes_batch(centers, others, inner, inner_edges)
        m = pts.shape[1]
        flat = pts.reshape(-1, 2)
        left = K2(np.repeat(Ys, m, axis=0), flat).reshape(P, m, 2, 2)
        right = K3(flat, np.broadcast_to(xprime, flat.shape)).reshape(P, m, 2, 2)
        Wv = W2(flat).reshape(P, m, 2, 2)
        G += np.einsum("pm,pmab,pmbc,pmcd->pad", wts, left, Wv, right)
    return G


def _compose3_estimate(K1, W1, K2, W2, K3, x, xprime, plan, base_edges):
    diagonal = bool(np.array_equal(x, xprime))
    inner = _inner_plan(plan)
    inner_edges = _base_edges(inner.radial_panels)
    patches = [_patch_nodes(x, xprime, plan, base_edges, diagonal=diagonal)]
    if not diagonal:
        patches.append(_patch_nodes(xprime, x, plan, base_edges))
    total = np.zeros((2, 2), dtype=complex)
    for pts, wts in patches:
        if pts.size == 0:
            continue
        Xrep = np.broadcast_to(np.asarray(x, dtype=float), pts.shape)
        A = K1(Xrep, pts)
        Wv = W1(pts)
        for i0 in range(0, pts.shape[0], 256):
            sl = slice(i0, min(i0 + 256, pts.shape[0]))
            G = _inner_batch(K2, W2, K3, pts[sl], xprime, inner, inner_edges)
            total += np.einsum("p,pab,pbc,pcd->ad", wts[sl], A[sl], Wv[sl], G)
    return total


def compose3(K1, W1, K2, W2, K3, x, xprime, plan=None):
    """Triple-kernel composition (K1 W1 K2 W2 K3)(x, x').

    The log singularity of the inner pair integrates away, so the diagonal
    x = x' is allowed.  Outer quadrature is refined once for an error
    estimate; the inner composition runs on a fixed reduced grid.
    """
    x = np.asarray(x, dtype=float)
    xprime = np.asarray(xprime, dtype=float)
    if plan is None:
        plan = CompositionPlan.for_pair(
            x, xprime, lam=getattr(K1, "lam", 1.0),
            n_angular=16, radial_panels=7, radial_nodes=8, max_refinements=1,
            tol=3e-3,
        )
    if W1.sup_norm == 0.0 or W2.sup_norm == 0.0:
        return ComposedValue(np.zeros((2, 2), dtype=complex), 0.0)
    edges = _base_edges(plan.radial_panels)
    cur = plan
    prev = None
    est = None
    for _ in range(plan.max_refinements + 1):
        est = _compose3_estimate(K1, W1, K2, W2, K3, x, xprime, cur, edges)
        if prev is not None:
            change = sup_norm(est - prev)
            if change < plan.tol * max(1.0, sup_norm(est)):
                return ComposedValue(est, float(change) + plan.tail_estimate)
        prev = est
        edges = _refine_edges(edges)
        cur = replace(cur, n_angular=2 * cur.n_angular)
    if prev is not None:
        # accept the finest estimate with an honest (larger) error bar
        return ComposedValue(est, float(sup_norm(est - prev)) + plan.tail_estimate)
    raise QuadratureError("triple composition did not converge", last=est, previous=prev)


def _dense_grid(x, xprime, lam, n):
    """Uniform grid on a half-plane box adapted to the pair (x, x')."""
    x = np.asarray(x, dtype=float)
    xprime = np.asarray(xprime, dtype=float)
    c1 = 0.5 * (x[0] + xprime[0])
    L = 0.5 * np.linalg.norm(x - xprime) + 12.0 / lam
    g1 = np.linspace(c1 - L, c1 + L, n)
    h = g1[1] - g1[0]
    g2 = h * (np.arange(n) + 0.5)
    Y = np.stack(np.meshgrid(g1, g2, indexing="ij"), axis=-1).reshape(-1, 2)
    return Y, h


def _dense_kernel_matrix(gamma, lam, Y, h):
    """Kernel matrix K(y_i, y_j) on the grid, with singular-cell correction.

    The diagonal cell integral of the kernel is dominated by the bulk part,
    whose cell average is computed in closed form over the equal-area disc
    (radius h/sqrt(pi)); the smooth reflected part is added at face value.
    """
    N = Y.shape[0]
    rho = h / np.sqrt(np.pi)
    diag_w = (1j / lam) * (1.0 - lam * rho * k1(lam * rho))
    Kmat = np.empty((N, N, 2, 2), dtype=complex)
    rows = max(1, (10 * _CHUNK) // N)
    for i0 in range(0, N, rows):
        sl = slice(i0, min(i0 + rows, N))
        m = sl.stop - sl.start
        Xb = np.repeat(Y[sl], N, axis=0)
        Yb = np.tile(Y, (m, 1))
        mask = np.all(Xb == Yb, axis=1)
        Kb = np.empty((m * N, 2, 2), dtype=complex)
        Kb[~mask] = halfplane_kernel_batch(gamma, lam, Xb[~mask], Yb[~mask])
        if np.any(mask):
            yc = Xb[mask]
            edge = lam * edge_F_batch(
                np.zeros(yc.shape[0]), 2.0 * lam * yc[:, 1], gamma
            ) @ SIGMA_1 / (4.0 * np.pi)
            Kb[mask] = edge + (diag_w / h**2) * np.eye(2)
        Kmat[sl] = Kb.reshape(m, N, 2, 2)
    return Kmat


def born_series(gamma, W, lam, order, x, xprime):
    """Partial Born series for the perturbed resolvent at energy i*lam.

    sum_{k<=order} (-1)^k [K W]^k K evaluated at (x, x'): orders 0..2 by the
    continuum compositions above, higher orders on a dense auxiliary grid
    (their size is already (|W|/lam)^3 of the leading term).  Requires
    |W| < lam; the certified tail is the geometric remainder.
    """
    if not isinstance(gamma, BoundaryParam):
        gamma = BoundaryParam(gamma)
    lam = float(lam)
    order = int(order)
    if not 0 <= order <= 5:
        raise ValueError(f"order must lie in 0..5, got {order}")
    if lam < 1.0:
        raise ValueError(f"lam must be >= 1, got {lam}")
    ratio = W.sup_norm / lam
    if ratio >= 1.0:
        raise ValueError(
            f"potential bound {W.sup_norm} is not below lam={lam}; "
            "the series is outside the certified convergence regime"
        )
    x = np.asarray(x, dtype=float)
    xprime = np.asarray(xprime, dtype=float)
    K = resolvent_kernel(gamma, lam)
    total = K(x[None, :], xprime[None, :])[0]
    err = 0.0
    if order >= 1 and W.sup_norm > 0.0:
        c2 = compose2(K, W, K, x, xprime)
        total = total - c2.value
        err += c2.error
    if order >= 2 and W.sup_norm > 0.0:
        # the quadratic term is already (|W|/lam)^2 of the leading one, so a
        # reduced quadrature plus a flat accuracy allowance is enough here
        plan3 = CompositionPlan.for_pair(
            x, xprime, lam=lam, n_angular=12, radial_panels=5,
            radial_nodes=6, max_refinements=0, tol=3e-3,
        )
        c3 = compose3(K, W, K, W, K, x, xprime, plan=plan3)
        total = total + c3.value
        err += c3.error + 2e-3 * ratio**2 / lam
    if order >= 3 and W.sup_norm > 0.0:
        Y, h = _dense_grid(x, xprime, lam, 30)
        Kmat = _dense_kernel_matrix(gamma, lam, Y, h)
        Wgrid = W(Y)
        KW = h**2 * np.einsum("mnab,nbc->mnac", Kmat, Wgrid)
        V = K(Y, np.broadcast_to(xprime, Y.shape))      # V_1 precursor: K(., x')
        V = np.einsum("mnab,nbc->mac", KW, V)
        V = np.einsum("mnab,nbc->mac", KW, V)            # now [KW]^2 K(., x')
        row = K(np.broadcast_to(x, Y.shape), Y)
        rowW = h**2 * np.einsum("nab,nbc->nac", row, Wgrid)
        for k in range(3, order + 1):
            term = np.einsum("nab,nbc->ac", rowW, V)     # [KW]^k K (x, x')
            total = total + (-1.0) ** k * term
            err += ratio**k * 0.1 / lam  # grid-accuracy allowance
            if k < order:
                V = np.einsum("mnab,nbc->mac", KW, V)
    tail = ratio ** (order + 1) / (lam * (1.0 - ratio))
    return BornResult(total, float(tail), float(err))


def low_lambda_form(resolvent_at_i, z, order=5):
    """Resolvent at a nearby energy from powers of the resolvent at i.

    Given the matrix R = (H - i)^{-1}, returns (sum_{j<=order} (z-i)^j R^{j+1},
    remainder_bound) with remainder_bound = |z-i|^{order+1} |Im z|^{-1} |R^3|^2
    in the spectral norm.  z is a SpectralPoint, so Im z != 0 is guaranteed.
    """
    R = np.asarray(resolvent_at_i, dtype=complex)
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        raise ValueError(f"resolvent must be a square matrix, got shape {R.shape}")
    dz = z.z - 1j
    acc = np.zeros_like(R)
    power = R.copy()
    for j in range(order + 1):
        acc += dz**j * power
        power = power @ R
    R3 = np.linalg.matrix_power(R, 3)
    bound = abs(dz) ** (order + 1) / abs(z.v) * np.linalg.norm(R3, ord=2) ** 2
    return acc, float(bound)
