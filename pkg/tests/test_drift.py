import math

import mpmath as mp
import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from pm_viab.drift import (
    StreamFunction,
    build_drift,
    build_group,
    cellular,
    gamma_l2_defect_mc,
    group_apply,
    mc_seeds,
    omega,
    omega_defect,
    sample_brownian,
    sample_brownian_batch,
)
from pm_viab.spatial import GridDomain

# folded-normal mean 2 e^{d^2/2} Phi(d) - 1 evaluated with mpmath at 40 digits
OMEGA_1 = 1.7742859576700095503
OMEGA_03 = 0.29270512513092359819
DEFECTS = {1e-3: 1.0015975207186674771, 0.5: 2.5606699371371862493,
           1.0: 9.8933362800749401409, 1.5: 75.241551100697758466}


def mp_omega(d):
    mp.mp.dps = 40
    d = mp.mpf(d)
    # 2 e^{d^2/2} Phi(d) - 1 regrouped so tiny d does not cancel
    return mp.expm1(d * d / 2) + mp.exp(d * d / 2) * mp.erf(d / mp.sqrt(2))


def dense_generator(grid, b):
    """(B0 - A B0^T A^{-1}) / 2 with B0 = D_b A^{-1}, assembled densely."""
    from pm_viab.drift import directional_derivative_matrix

    A = grid.matrix.toarray()
    Ainv = np.linalg.inv(A)
    B0 = directional_derivative_matrix(b).toarray() @ Ainv
    return 0.5 * (B0 - A @ B0.T @ Ainv), A


def hm1_to_l2_norm(M, A):
    w, V = np.linalg.eigh(A)
    return np.linalg.norm(M @ (V * np.sqrt(w)) @ V.T, 2)


# -- drift fields -------------------------------------------------------------------


def test_center_of_sine_stream_is_stagnation_point(grid7):
    b = build_drift(grid7, "cellular")
    c = grid7.n_per_dim // 2 + 1  # x = 0.5 on the closed grid
    assert abs(b.b_x[c, c]) < 1e-14 and abs(b.b_y[c, c]) < 1e-14


def test_zero_stream_gives_identity_group(grid7, rng):
    b = build_drift(grid7, "zero")
    assert b.is_zero
    G = build_group(grid7, b)
    assert G.is_trivial and not np.any(G.generator)
    phi = rng.standard_normal(grid7.dim)
    assert np.array_equal(G.apply(3.0, phi), phi)


def test_normal_component_vanishes_on_boundary(grid7):
    for name in ("cellular", "bubble"):
        assert np.all(build_drift(grid7, name).boundary_normal() == 0.0)


def test_rejects_stream_not_vanishing_on_boundary(grid7):
    bad = StreamFunction("shifted", lambda x, y: 1.0 + x * y, lambda x, y: y + 0 * x, lambda x, y: x + 0 * y)
    with pytest.raises(ValueError, match="does not vanish"):
        build_drift(grid7, bad)
    with pytest.raises(ValueError):
        build_drift(grid7, "vortex")


def test_divergence_is_second_order():
    # sin(pi x) sin(pi y) gives an exactly divergence-free discrete field, so refine a (2, 1) cell
    hs, divs = [], []
    for n in (7, 15, 31):
        g = GridDomain(n)
        hs.append(g.h)
        divs.append(np.max(np.abs(build_drift(g, cellular(1.0, 2, 1)).divergence())))
    slope = np.polyfit(np.log(hs), np.log(divs), 1)[0]
    assert 1.9 <= slope <= 2.1
    assert np.max(np.abs(build_drift(GridDomain(15), "cellular").divergence())) < 1e-12


# -- the group ----------------------------------------------------------------------


def test_generator_matches_dense_construction(grid7, group7, rng):
    B, _ = dense_generator(grid7, build_drift(grid7, "cellular"))
    phi = rng.standard_normal((4, grid7.dim))
    assert np.allclose(group7.generator_apply(phi), phi @ B.T, atol=1e-10 * np.abs(phi @ B.T).max())


def test_group_matches_dense_matrix_exponential(grid7, group7, rng):
    B, _ = dense_generator(grid7, build_drift(grid7, "cellular"))
    phi = rng.standard_normal(grid7.dim)
    for s in (-0.7, 0.2, 2.0):
        assert np.allclose(group_apply(group7, s, phi), sla.expm(s * B) @ phi, atol=1e-9)


def test_op_norm_matches_dense_svd(grid7, group7):
    B, A = dense_generator(grid7, build_drift(grid7, "cellular"))
    oracle = hm1_to_l2_norm(B, A)
    assert abs(group7.op_norm - oracle) <= 1e-8 * oracle


def test_skew_form_isometry_adjoint(grid7, group7, rng):
    phi = rng.standard_normal((100, grid7.dim))
    psi = rng.standard_normal((100, grid7.dim))
    n2 = grid7.norm_sq(phi)
    assert np.max(np.abs(grid7.inner(group7.generator_apply(phi), phi, "Hminus1")) / n2) <= 1e-10
    for s in (0.1, -0.1, 1.0, -1.0, 5.0, -5.0):
        moved = group7.apply(s, phi)
        assert np.max(np.abs(grid7.norm(moved) - np.sqrt(n2))) <= 1e-9
        lhs = grid7.inner(moved, psi, "Hminus1")
        rhs = grid7.inner(phi, group7.apply(-s, psi), "Hminus1")
        assert np.max(np.abs(lhs - rhs)) <= 1e-9
    assert np.array_equal(group7.apply(0.0, phi), group7.apply(0.0, phi))
    assert np.allclose(group7.apply(0.0, phi), phi, atol=1e-12)


def test_group_property(group7, rng):
    phi = rng.standard_normal((10, group7.grid.dim))
    for s, r in ((0.3, 0.4), (-1.0, 2.5), (5.0, -5.0)):
        assert np.allclose(group7.apply(s + r, phi), group7.apply(s, group7.apply(r, phi)), atol=1e-9)


def test_per_sample_times(group7, rng):
    phi = rng.standard_normal((3, group7.grid.dim))
    s = np.array([0.1, -0.4, 2.0])
    out = group7.apply(s, phi)
    for k in range(3):
        assert np.allclose(out[k], group7.apply(s[k], phi[k]), atol=1e-12)


def test_distance_from_identity_bound(grid7, group7):
    B, A = dense_generator(grid7, build_drift(grid7, "cellular"))
    for s in np.linspace(-1, 1, 9):
        E = sla.expm(s * B) - np.eye(grid7.dim)
        assert hm1_to_l2_norm(E, A) <= math.expm1(abs(s) * group7.op_norm) * (1 + 1e-9) + 1e-12
        # stays a bounded operator on L2
        assert np.linalg.norm(sla.expm(s * B), 2) < np.inf


# -- omega --------------------------------------------------------------------------


def test_omega_values():
    assert omega(0.0) == 0.0
    assert omega(1.0) == pytest.approx(OMEGA_1, rel=1e-13)
    assert omega(0.3) == pytest.approx(OMEGA_03, rel=1e-13)
    with pytest.raises(ValueError):
        omega(-0.1)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 4.0))
def test_omega_against_high_precision(d):
    assert omega(d) == pytest.approx(float(mp_omega(d)), rel=1e-12, abs=1e-300)


def test_omega_first_order_expansion():
    ds = np.linspace(1e-4, 0.5, 200)
    r = [(omega(d) - 2 * d / math.sqrt(2 * math.pi)) / d**2 for d in ds]
    assert max(abs(v) for v in r) < 1.0


def test_omega_defect_values_and_limit():
    for d, ref in DEFECTS.items():
        assert omega_defect(d) == pytest.approx(ref, rel=1e-12)
    seq = [omega_defect(2.0**-k) for k in range(1, 21)]
    assert max(seq) == seq[0] and np.isfinite(max(seq))
    gaps = np.abs(np.diff(seq))
    assert np.all(gaps[1:] <= gaps[:-1] * 0.6)  # Cauchy, geometric
    assert seq[-1] == pytest.approx(1.0, abs=1e-5)
    with pytest.raises(ValueError):
        omega_defect(0.0)


@pytest.mark.parametrize("d", [0.01, 0.3, 1.0, 2.0])
def test_omega_defect_identity(d):
    assert abs(omega_defect(d) * d * d - (omega(2 * d) - 2 * omega(d))) <= 1e-12 * max(1.0, omega(2 * d))


# -- Brownian paths -----------------------------------------------------------------


def test_brownian_determinism_and_start():
    a = sample_brownian(0.0, 1.0, 0.01, seed=7)
    b = sample_brownian(0.0, 1.0, 0.01, seed=7)
    assert np.array_equal(a.values, b.values)
    assert a.values[0] == 0.0 and a.n_steps == 100
    assert not np.array_equal(a.values, sample_brownian(0.0, 1.0, 0.01, seed=8).values)
    with pytest.raises(ValueError):
        sample_brownian(0.0, 1.0, 0.0, seed=0)
    with pytest.raises(ValueError):
        sample_brownian(1.0, 1.0, 0.1, seed=0)


def test_brownian_variance_over_many_seeds():
    ends = np.array([sample_brownian(0.0, 0.5, 0.125, seed=s).values[-1] for s in range(100_000)])
    assert abs(ends.var() / 0.5 - 1.0) < 0.02


def test_increment_variance_is_stationary():
    path = sample_brownian_batch(0.0, 2.0, 0.05, mc_seeds(3, 20_000))
    w = path.values
    v1 = np.var(w[:, 10] - w[:, 0])
    v2 = np.var(w[:, 35] - w[:, 25])
    assert abs(v1 - v2) / 0.5 < 0.05
    assert path.n_samples == 20_000


# -- L2 defect of Gamma ------------------------------------------------------------


def test_gamma_defect_zero_drift(still7, grid7):
    assert gamma_l2_defect_mc(still7, grid7.eigenvector(1, 1), 0.1) == 0.0
    with pytest.raises(ValueError):
        gamma_l2_defect_mc(still7, grid7.eigenvector(1, 1), 0.1, n_samples=10)


def test_gamma_defect_linear_in_duration(group7, grid7):
    zeta = grid7.eigenvector(1, 1) + 0.5 * grid7.eigenvector(2, 1)
    lags = [2.0**-k for k in range(4, 10)]
    vals = [gamma_l2_defect_mc(group7, zeta, s) for s in lags]
    assert np.polyfit(np.log(lags), np.log(vals), 1)[0] >= 0.9


def test_gamma_defect_constant_across_fields(group7, grid7, rng):
    # E||(e^{wB}-I) z||^2 <= E(e^{|w| ||B||}-1)^2 ||z||^2 ~ ||B||^2 (s-t) ||z||^2
    ratios = []
    for _ in range(5):
        z = grid7.synthesize(grid7.coefficients(rng.standard_normal(grid7.dim)) / grid7.eigenvalues**0.5)
        ratios.append(gamma_l2_defect_mc(group7, z, 2.0**-8) / (2.0**-8 * grid7.norm_sq(z)))
    assert max(ratios) <= 1.5 * group7.op_norm**2
