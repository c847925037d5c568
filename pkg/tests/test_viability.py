import functools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pm_viab.drift import build_drift, build_group
from pm_viab.dynamics import System
from pm_viab.model import ControlSet, make_beta, make_coupling
from pm_viab.spatial import GridDomain
from pm_viab.stabilization import StabilizationConfig
from pm_viab.viability import (
    appendix_initial_estimate,
    construct_eps_approx,
    make_constraint,
    near_viability_gap,
    report_passed,
    scaled_corrections,
    tangency_profile,
    validate_eps_approx,
)


@functools.cache
def _setup():
    grid = GridDomain(7)
    return grid, build_group(grid, build_drift(grid, "cellular"))


def decay_problem(c_over_lambda):
    """beta = id, f1 = 0, y' = -c y, K = {||x||^2 <= y}, start on the boundary at e11."""
    grid, group = _setup()
    U = ControlSet([[0.0], [1.0]])
    lam = grid.eigenvalues[0, 0]
    cfg = StabilizationConfig(c_over_lambda * lam, grid.dim, make_beta("linear"),
                              make_coupling("zero", {}, U, grid, None, 1), U, grid, group)
    K = make_constraint("decay-epigraph", cfg.system)
    xi = grid.eigenvector(1, 1)
    return K, cfg.model(), xi, float(grid.norm_sq(xi))


@functools.cache
def record(c_over_lambda, eps, T=0.1, n_mc=8):
    K, model, xi, eta = decay_problem(c_over_lambda)
    return construct_eps_approx(K, model, 0.0, T, xi, eta, eps, n_mc=n_mc)


# -- constraint oracles ----------------------------------------------------------


def _epigraph():
    grid, group = _setup()
    return grid, make_constraint("decay-epigraph", System(grid, group))


def _random_outside(rng, grid, n):
    x = grid.synthesize(rng.standard_normal((n,) + grid.shape) * 10 ** rng.uniform(-1, 1, (n, 1, 1)))
    y = grid.norm_sq(x) * rng.uniform(-2, 0.99, n)
    return x, y


def test_epigraph_projection_beats_scan_and_samples(rng):
    grid, K = _epigraph()
    x, y = _random_outside(rng, grid, 20)
    px, py = K.project(x, y)
    assert np.all(K.contains(px, py))
    d = K.distance_sq(x, y)
    # every point of K is at least as far away
    for i in range(len(y)):
        r2 = grid.norm_sq(x[i])
        a = np.linspace(0, 1, 200_001)
        scan = (1 - a) ** 2 * r2 + (y[i] - a * a * r2) ** 2
        assert d[i] <= scan.min() * (1 + 1e-9) + 1e-15
        w = grid.synthesize(rng.standard_normal((1000,) + grid.shape)) * rng.uniform(0, 2, (1000, 1))
        s = grid.norm_sq(w) + rng.exponential(grid.norm_sq(x[i]), 1000)
        others = grid.norm_sq(w - x[i]) + (s - y[i]) ** 2
        assert d[i] <= others.min() + 1e-12


def test_epigraph_projection_is_idempotent(rng):
    grid, K = _epigraph()
    x, y = _random_outside(rng, grid, 50)
    px, py = K.project(x, y)
    qx, qy = K.project(px, py)
    assert np.allclose(qx, px, atol=1e-14) and np.allclose(qy, py, atol=1e-14)
    inside_y = grid.norm_sq(x) + 1.0
    assert not np.any(K.distance_sq(x, inside_y))


def test_epigraph_batched_inputs(rng):
    grid, K = _epigraph()
    x, y = _random_outside(rng, grid, 12)
    px, py = K.project(x.reshape(3, 4, -1), y.reshape(3, 4))
    fx, fy = K.project(x, y)
    assert np.array_equal(px.reshape(12, -1), fx) and np.array_equal(py.ravel(), fy)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 5.0), st.integers(0, 2**31))
def test_ball_projection_is_radial(radius, seed):
    grid, group = _setup()
    K = make_constraint("centered-ball", System(grid, group), radius=radius)
    rng = np.random.default_rng(seed)
    x = grid.synthesize(rng.standard_normal((5,) + grid.shape)) * rng.uniform(0, 3, (5, 1))
    y = rng.standard_normal(5)
    px, py = K.project(x, y)
    n = np.sqrt(grid.norm_sq(x) + y * y)
    expect = np.minimum(1.0, radius / n)
    assert np.allclose(px, x * expect[:, None]) and np.allclose(py, y * expect)
    assert np.allclose(K.distance(x, y), np.maximum(n - radius, 0.0), atol=1e-12)


def test_whole_space_and_rejections(rng):
    grid, group = _setup()
    system = System(grid, group)
    K = make_constraint("whole-space", system)
    x = rng.standard_normal((4, grid.dim))
    assert not np.any(K.distance(x, np.ones(4)))
    with pytest.raises(ValueError):
        make_constraint("centered-ball", system, radius=0.0)
    with pytest.raises(ValueError):
        make_constraint("half-space", system)
    with pytest.raises(ValueError):
        make_constraint("decay-epigraph", System(grid, group, grid, group))


# -- tangency --------------------------------------------------------------------


def test_tangency_vanishes_at_equilibrium_and_whole_space():
    K, model, xi, eta = decay_problem(0.5)
    eps = [0.004, 0.008]
    prof = tangency_profile(K, model, 0.0, np.zeros_like(xi), 0.0, eps, n_mc=4)
    assert not np.any(prof.q) and prof.extrapolated == 0.0
    W = make_constraint("whole-space", K.system)
    assert not np.any(tangency_profile(W, model, 0.0, xi, eta, eps, n_mc=4).q)


def test_tangency_detects_infeasible_rate():
    K, model, xi, eta = decay_problem(3.0)
    dt = 0.001
    prof = tangency_profile(K, model, 0.0, xi, eta, [0.002, 0.004, 0.008], n_mc=4, dt=dt)
    assert list(prof.epsilons) == [0.002, 0.004, 0.008]
    assert prof.q.min() > 0 and prof.extrapolated > 0
    with pytest.raises(ValueError):
        tangency_profile(K, model, 0.0, xi, 2 * eta * 0.1, [0.002], n_mc=4, dt=dt)


# -- eps-approximate solutions ---------------------------------------------------


@pytest.mark.parametrize("eps", [0.1, 0.02])
def test_feasible_record_passes_every_clause(eps):
    K, model, *_ = decay_problem(2.0)
    rec = record(2.0, eps)
    assert rec.complete and rec.T_bar == pytest.approx(rec.T)
    report = validate_eps_approx(rec, K, model)
    assert report_passed(report), report
    assert rec.correction_energy(K.system) > 0


def test_tau_properties():
    rec = record(2.0, 0.02)
    steps = np.arange(len(rec.tau))
    assert np.all(np.diff(rec.tau) >= 0) and np.all(rec.tau <= steps)
    assert np.max(steps - rec.tau) * rec.dt <= rec.eps
    assert set(rec.tau) == set(rec.node_steps)


def test_inflated_corrections_break_the_energy_clause():
    K, model, *_ = decay_problem(2.0)
    rec = record(2.0, 0.1)
    big = scaled_corrections(rec, 10.0)
    assert big.correction_energy(K.system) == pytest.approx(100 * rec.correction_energy(K.system))
    report = validate_eps_approx(big, K, model, reintegrate=False)
    assert not report[4].passed and report[4].slack < 0
    assert report[6].passed


def test_tampered_node_breaks_reintegration():
    K, model, *_ = decay_problem(2.0)
    rec = record(2.0, 0.1)
    bad = scaled_corrections(rec, 1.0)
    bad.node_x = rec.node_x.copy()
    bad.node_x[1] *= 0.9
    assert not validate_eps_approx(bad, K, model)[5].passed


def test_zero_forcing_equilibrium_needs_no_correction():
    K, model, xi, _ = decay_problem(0.5)
    rec = construct_eps_approx(K, model, 0.0, 0.05, 0 * xi, 0.0, 0.02, n_mc=4)
    assert rec.complete and rec.correction_energy(K.system) == 0.0
    assert not np.any(rec.node_x)


def test_infeasible_rate_stops_with_diagnostic():
    rec = record(3.0, 0.1)
    assert not rec.complete and "quasi-tangency" in rec.diagnostic
    K, model, *_ = decay_problem(3.0)
    assert report_passed(validate_eps_approx(rec, K, model))


def test_rejects_bad_arguments():
    K, model, xi, eta = decay_problem(0.5)
    with pytest.raises(ValueError):
        construct_eps_approx(K, model, 0.0, 0.1, xi, eta, 0.0)
    with pytest.raises(ValueError):
        construct_eps_approx(K, model, 0.1, 0.1, xi, eta, 0.1)
    with pytest.raises(ValueError):
        construct_eps_approx(K, model, 0.0, 0.1, xi, 0.5 * eta, 0.1)


def test_initial_estimate_is_at_least_linear_in_time():
    K, *_ , xi, eta = decay_problem(2.0)
    rec = record(2.0, 0.02)
    est = appendix_initial_estimate(rec, K.system, xi, eta)
    assert est.passed and est.slope >= 0.9 and est.c_emp > 0
    order = np.argsort(est.lags)
    assert np.all(np.diff(est.values[order]) > 0)
    grid = K.system.grid_x
    factor = 1 + grid.norm_sq(xi, "L2") + eta**2 + rec.correction_energy(K.system)
    assert np.all(est.values <= est.c_emp * factor * est.lags * (1 + 1e-12))
    assert np.max(est.values / (factor * est.lags)) == pytest.approx(est.c_emp)


# -- near viability --------------------------------------------------------------


def test_gap_is_zero_when_feasible():
    K, model, xi, eta = decay_problem(0.5)
    assert near_viability_gap(K, model, 0.0, 0.1, xi, eta, 0.02, n_mc=4).gap == 0.0


def test_gap_shrinks_with_eps_when_infeasible():
    K, model, xi, eta = decay_problem(3.0)
    gaps = [near_viability_gap(K, model, 0.0, 0.1, xi, eta, e, n_mc=8).gap for e in (0.02, 0.005)]
    assert 0 < gaps[1] < gaps[0]
