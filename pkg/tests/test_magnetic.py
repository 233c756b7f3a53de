import numpy as np
import pytest

from dirac_edge.edge_kernel import fit_decay, halfplane_kernel
from dirac_edge.magnetic import (
    MagneticField,
    S_b_kernel,
    T_b_kernel,
    dirac_stencil_2d,
    gauge_phase,
    magnetic_resolvent,
    magnetic_translation_matrix,
    schur_norm_Tb,
    select_lambda0,
    transverse_gauge,
    transverse_gauge_residual,
)

RNG = np.random.default_rng(1217)


def test_magnetic_field_validation():
    with pytest.raises(ValueError):
        MagneticField(0.0)
    with pytest.raises(ValueError):
        MagneticField(-1.0)
    fld = MagneticField(0.7)
    assert np.allclose(fld.a([1.0, 2.0]), [-1.4, 0.0])


def test_gauge_phase_values():
    x = np.array([0.4, 1.1])
    assert gauge_phase(x, x) == 0.0
    assert gauge_phase([0.0, 1.0], [2.0, 3.0]) == 4.0
    X = RNG.normal(size=(30, 2))
    Y = RNG.normal(size=(30, 2))
    assert np.max(np.abs(gauge_phase(X, Y) + gauge_phase(Y, X))) < 1e-14


def test_transverse_gauge_residual_matches_a_t():
    for _ in range(10):
        x, xp = RNG.normal(size=2), RNG.normal(size=2)
        res = transverse_gauge_residual(x, xp)
        assert np.allclose(res, transverse_gauge(x - xp), atol=1e-12)


def test_S_b_is_phase_dressed_kernel():
    x, xp = np.array([0.3, 1.0]), np.array([1.1, 0.4])
    K = halfplane_kernel(1.0, 2.0, x, xp)
    S = S_b_kernel(0.8, None, 1.0, 2.0, x, xp)
    # dressing by a unit-modulus phase: entrywise moduli unchanged
    assert np.max(np.abs(np.abs(S) - np.abs(K))) < 1e-15
    assert np.max(np.abs(S_b_kernel(0.0, None, 1.0, 2.0, x, xp) - K)) < 1e-15


def test_T_b_entrywise_bound():
    # |T_b(x,x')| = (b/2)|x-x'| |K(x,x')| entrywise after the sigma row swap
    x, xp = np.array([0.3, 1.0]), np.array([1.1, 0.4])
    b = 0.8
    K = halfplane_kernel(1.0, 2.0, x, xp)
    T = T_b_kernel(b, None, 1.0, 2.0, x, xp)
    d = np.linalg.norm(x - xp)
    assert np.max(np.abs(T) - (b / 2.0) * d * np.abs(K[::-1, :])) < 1e-14
    assert np.max(np.abs(T_b_kernel(b, None, 1.0, 2.0, x, x))) == 0.0
    assert np.max(np.abs(T_b_kernel(0.0, None, 1.0, 2.0, x, xp))) == 0.0


def test_schur_estimate_scaling():
    s4 = schur_norm_Tb(0.5, None, 1.0, 4.0)
    s8 = schur_norm_Tb(0.5, None, 1.0, 8.0)
    assert 3.5 <= s4 / s8 <= 4.5          # ~ 1/lambda^2
    sb = schur_norm_Tb(1.0, None, 1.0, 4.0)
    assert 1.9 <= sb / s4 <= 2.1          # linear in b


def test_schur_estimate_input_handling():
    assert schur_norm_Tb(0.0, None, 1.0, 4.0) == 0.0
    with pytest.raises(ValueError):
        schur_norm_Tb(0.5, None, 1.0, 0.5)


def test_select_lambda0():
    assert select_lambda0(0.5, None, 1.0, [1.0, 2.0, 4.0]) == 2.0
    with pytest.raises(ValueError):
        select_lambda0(2.0, None, 1.0, [1.0])


def _interior_rows(n1, n2, margin=1):
    idx = np.arange(n1 * n2)
    ii, jj = idx // n2, idx % n2
    sites = idx[
        (ii >= margin) & (ii < n1 - margin) & (jj >= margin) & (jj < n2 - margin)
    ]
    return np.sort(np.concatenate([2 * sites, 2 * sites + 1]))


def test_gauge_covariance_stencil_identity():
    # conjugating the Landau-gauge stencil by e^{i b phi(.,x')} yields the
    # transverse-gauge stencil centered at x', exactly, on interior rows
    h, n1, n2, b = 0.25, 12, 12, 0.6
    xp = np.array([0.1, -0.3])
    Hb, coords = dirac_stencil_2d(h, n1, n2, b=b, gauge="landau", x2_offset=-1.5)
    Ht, _ = dirac_stencil_2d(
        h, n1, n2, b=b, gauge="transverse", xprime=xp, x2_offset=-1.5
    )
    P = np.diag(np.repeat(np.exp(1j * b * gauge_phase(coords, xp)), 2))
    rows = _interior_rows(n1, n2)
    resid = (Hb @ P - P @ Ht)[rows]
    assert np.max(np.abs(resid)) < 1e-13


def test_magnetic_translation_commutes_with_stencil():
    h, n1, n2, b = 0.25, 12, 12, 0.6
    ell = np.array([1.0, 0.5])
    H, coords = dirac_stencil_2d(h, n1, n2, b=b, gauge="landau", x2_offset=-1.5)
    U = magnetic_translation_matrix(coords, h, n1, n2, ell, b)
    margin = 1 + int(round(max(abs(ell)) / h))
    rows = _interior_rows(n1, n2, margin=margin)
    comm = (H @ U - U @ H)[np.ix_(rows, rows)]
    assert np.max(np.abs(comm)) < 1e-13
    with pytest.raises(ValueError, match="multiple of the grid step"):
        magnetic_translation_matrix(coords, h, n1, n2, [0.3, 0.0], b)


def test_magnetic_resolvent_order0_is_S_b():
    x, xp = np.array([0.2, 0.6]), np.array([0.5, 0.9])
    val, tail = magnetic_resolvent(0.5, None, 1.0, 8.0, 0, x, xp)
    assert np.array_equal(val, S_b_kernel(0.5, None, 1.0, 8.0, x, xp))
    assert tail > 0.0


def test_magnetic_resolvent_series_refusal():
    with pytest.raises(ValueError, match="not certified"):
        magnetic_resolvent(2.0, None, 1.0, 1.0, 2, [0.2, 0.6], [0.5, 0.9])


def test_magnetic_resolvent_finite_difference_residual():
    # apply the discrete D_b - i lam (Landau gauge) to the assembled column;
    # away from the source the result must be small on the kernel scale
    b, lam = 0.5, 8.0
    xp = np.array([0.3, 0.6])
    x0 = np.array([0.1, 0.45])
    hfd = 1e-3
    X = np.array(
        [x0, x0 + [hfd, 0], x0 - [hfd, 0], x0 + [0, hfd], x0 - [0, hfd]]
    )
    vals, tail = magnetic_resolvent(b, None, 1.0, lam, 3, X, xp)
    K = vals[0]
    d1 = (vals[1] - vals[2]) / (2 * hfd)
    d2 = (vals[3] - vals[4]) / (2 * hfd)
    resid = np.empty((2, 2), dtype=complex)
    resid[0, :] = -1j * d1[1, :] - d2[1, :] + b * x0[1] * K[1, :] - 1j * lam * K[0, :]
    resid[1, :] = -1j * d1[0, :] + d2[0, :] + b * x0[1] * K[0, :] - 1j * lam * K[1, :]
    rel = np.max(np.abs(resid)) / (lam * np.max(np.abs(K)))
    assert rel < 1e-2
    assert tail < 1e-8


def test_magnetic_resolvent_adjoint_consistency():
    # the i*lam and mirror -i*lam assemblies differ only by series reordering,
    # second order in T: well below the first-order correction itself
    b, lam = 0.5, 8.0
    x0, xp = np.array([0.1, 0.45]), np.array([0.3, 0.6])
    v_0, _ = magnetic_resolvent(b, None, 1.0, lam, 0, x0, xp)
    v_f, _ = magnetic_resolvent(b, None, 1.0, lam, 2, x0, xp)
    v_a, _ = magnetic_resolvent(b, None, 1.0, lam, 2, x0, xp, adjoint=True)
    diff = np.max(np.abs(v_f - v_a))
    corr = np.max(np.abs(v_f - v_0))
    assert diff < 0.5 * corr
    assert diff < 1e-3


def test_magnetic_kernel_decay_shape():
    # fitted decay of the dressed kernel: positive rate, prefactor within 10x
    # of the zero-field fit (moderate b, large lambda)
    b, lam, g = 0.5, 4.0, 1.0
    xp = np.array([0.2, 0.6])
    u = np.array([0.8, 0.6])
    rs = np.geomspace(0.3, 3.2, 22)
    X = xp[None, :] + rs[:, None] * u[None, :]
    vals, _ = magnetic_resolvent(b, None, g, lam, 1, X, xp)
    fit_b = fit_decay([(x, xp, m) for x, m in zip(X, vals)], lam)
    fit_0 = fit_decay(
        [(x, xp, halfplane_kernel(g, lam, x, xp)) for x in X], lam
    )
    assert fit_b.c_hat > 0.0
    assert 0.1 < fit_b.C_hat / fit_0.C_hat < 10.0
