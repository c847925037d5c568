"""Constraint oracles, quasi-tangency profiles, constrained eps-approximate solutions, near viability."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .drift import BrownianPath, mc_seeds, sample_brownian_batch
from .dynamics import System, integrate, loglog_fit, rate_step, system_stable_step
from .model import ModelSpec

CONTAINS_TOL = 1e-10


# -- constraint sets -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ConstraintOracle:
    """Closed K in the product metric of H^-1 x (H^-1 or R), with an exact nearest-point map."""

    name: str
    system: System
    params: dict = field(default_factory=dict)

    def _sq(self, x, y):
        return self.system.norm_sq_x(x), self.system.norm_sq_y(y)

    def violation(self, x, y) -> np.ndarray:
        """Signed constraint value; <= 0 inside K."""
        nx, ny = self._sq(x, y)
        if self.name == "whole-space":
            return np.zeros(np.shape(nx))
        if self.name == "decay-epigraph":
            return nx - np.asarray(y, dtype=float)
        return nx + ny - self.params["radius"] ** 2

    def contains(self, x, y, tol: float = CONTAINS_TOL) -> np.ndarray:
        nx, ny = self._sq(x, y)
        return self.violation(x, y) <= tol * (1.0 + nx + ny)

    def project(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if self.name == "whole-space":
            return x.copy(), y.copy()
        if self.name == "centered-ball":
            nx, ny = self._sq(x, y)
            r = np.sqrt(nx + ny)
            scale = np.where(r > self.params["radius"], self.params["radius"] / np.maximum(r, 1e-300), 1.0)
            return x * scale[..., None], y * (scale if self.system.scalar_y else scale[..., None])
        return _project_epigraph(self.system.norm_sq_x(x), x, y)

    def distance_sq(self, x, y) -> np.ndarray:
        px, py = self.project(x, y)
        return self.system.norm_sq(np.asarray(x) - px, np.asarray(y) - py)

    def distance(self, x, y) -> np.ndarray:
        return np.sqrt(self.distance_sq(x, y))


def _epigraph_scale(r2: float, eta: float) -> float:
    """argmin over a in [0,1] of (1-a)^2 r^2 + (eta - a^2 r^2)^2 (boundary of ||x||^2 <= y)."""
    roots = np.roots([2.0 * r2, 0.0, 1.0 - 2.0 * eta, -1.0])
    cands = [0.0, 1.0] + [float(z.real) for z in roots if abs(z.imag) < 1e-10 and 0.0 <= z.real <= 1.0]
    g = [(1 - a) ** 2 * r2 + (eta - a * a * r2) ** 2 for a in cands]
    return cands[int(np.argmin(g))]


def _project_epigraph(r2, x, y):
    if np.ndim(y) > 1:
        px, py = _project_epigraph(np.ravel(r2), x.reshape(-1, x.shape[-1]), np.ravel(y))
        return px.reshape(x.shape), py.reshape(np.shape(y))
    r2 = np.atleast_1d(r2)
    yv = np.atleast_1d(y)
    a = np.ones_like(r2)
    sigma = yv.astype(float).copy()
    for i in np.flatnonzero(r2 > yv):
        if r2[i] == 0.0:
            a[i], sigma[i] = 0.0, max(yv[i], 0.0)
            continue
        a[i] = _epigraph_scale(float(r2[i]), float(yv[i]))
        sigma[i] = a[i] ** 2 * r2[i]
    if np.ndim(y) == 0:
        return a[0] * x, float(sigma[0])
    return x * a[:, None], sigma


CONSTRAINT_KINDS = ("whole-space", "decay-epigraph", "centered-ball")


def make_constraint(kind: str, system: System, **params) -> ConstraintOracle:
    if kind not in CONSTRAINT_KINDS:
        raise ValueError(f"unknown constraint kind {kind!r}; known: {CONSTRAINT_KINDS}")
    if kind == "decay-epigraph" and not system.scalar_y:
        raise ValueError("decay-epigraph needs a scalar second component")
    if kind == "centered-ball":
        r = float(params.get("radius", 1.0))
        if r <= 0:
            raise ValueError("ball radius must be positive")
        params = {"radius": r}
    return ConstraintOracle(kind, system, params)


def _require_inside(K: ConstraintOracle, xi, eta):
    if not np.all(K.contains(xi, eta)):
        raise ValueError(f"initial state lies outside {K.name}")


# -- quasi-tangency --------------------------------------------------------------


@dataclass
class TangencyProfile:
    epsilons: np.ndarray
    q: np.ndarray
    q_by_control: np.ndarray  # (n_eps, |U|)
    best_control: np.ndarray
    extrapolated: float
    n_mc: int
    seeds: list


def tangency_profile(K: ConstraintOracle, model: ModelSpec, t: float, xi, eta,
                     epsilons: Sequence[float], n_mc: int, seed: int = 0,
                     dt: float | None = None) -> TangencyProfile:
    """Q(eps) = min_u (1/eps^2) E[dist_K^2(x_hat(t+eps), y_hat(t+eps))] for constant controls."""
    _require_inside(K, xi, eta)
    system = K.system
    eps = sorted(float(e) for e in epsilons)
    dt = rate_step(system, model, eps) if dt is None else dt
    steps = [int(round(e / dt)) for e in eps]
    if any(abs(s * dt - e) > 1e-9 * e for s, e in zip(steps, eps)):
        raise ValueError("epsilons must be whole multiples of dt")
    path = sample_brownian_batch(t, t + eps[-1], dt, mc_seeds(seed, n_mc))
    w = path.values - path.values[:, :1]
    q = np.empty((len(eps), len(model.controls)))
    for c in range(len(model.controls)):
        rx, ry, _, rec = integrate(model, system, xi, eta, w, dt, steps[-1], c,
                                   scheme="fundamental", record=steps, s0=t)
        for k, e in enumerate(eps):
            q[k, c] = float(np.mean(K.distance_sq(rx[k], ry[k]))) / e**2
    best = np.argmin(q, axis=1)
    qmin = q[np.arange(len(eps)), best]
    extra = max(0.0, 2 * qmin[0] - qmin[1]) if len(eps) > 1 else float(qmin[0])
    return TangencyProfile(np.array(eps), qmin, q, best, float(extra), n_mc, [seed])


# -- constrained eps-approximate solutions ----------------------------------------


@dataclass(eq=False)
class EpsApproxRecord:
    """(T_bar, tau, u, phi_1, phi_2, (X, Y)) at grid resolution.

    Node k covers steps [node_steps[k], node_steps[k+1]); tau maps every step of
    that window to its left end.  Corrections are piecewise constant,
    phi_i = p_i[k] / delta_k, so the correction energy of window k is
    E||p_i[k]||^2 / delta_k.
    """

    t: float
    T: float
    T_bar: float
    eps: float
    dt: float
    node_steps: list
    controls: np.ndarray  # (S, M_bar)
    p_x: np.ndarray  # (K, S, N1)
    p_y: np.ndarray
    node_x: np.ndarray  # (K+1, S, N1), states at the nodes (in K)
    node_y: np.ndarray
    end_x: np.ndarray  # (K, S, N1), integrated window ends
    end_y: np.ndarray
    tau_gap: np.ndarray  # (M_bar+1,) E ||X(tau(s)) - X(s)||^2 + E |Y(tau(s)) - Y(s)|^2
    initial_gap: np.ndarray  # (M_bar+1,) E ||X(s) - xi||^2 + E |Y(s) - eta|^2
    path: BrownianPath = field(repr=False)
    complete: bool = True
    diagnostic: str = ""
    seeds: list = field(default_factory=list)

    @property
    def n_samples(self) -> int:
        return self.controls.shape[0]

    @property
    def deltas(self) -> np.ndarray:
        return np.diff(self.node_steps) * self.dt

    @property
    def tau(self) -> np.ndarray:
        """Step index of tau(s_m) for every m in 0..M_bar."""
        steps = np.arange(self.node_steps[-1] + 1)
        k = np.searchsorted(self.node_steps, steps, side="right") - 1
        k[-1] = len(self.node_steps) - 1  # T_bar itself is a node
        return np.asarray(self.node_steps)[k]

    def energy(self, system: System) -> tuple[float, float]:
        """E int ||phi_i||^2 for each component."""
        d = self.deltas
        ex = float(np.sum(system.norm_sq_x(self.p_x).mean(axis=1) / d)) if len(d) else 0.0
        ey = float(np.sum(system.norm_sq_y(self.p_y).mean(axis=1) / d)) if len(d) else 0.0
        return ex, ey

    def correction_energy(self, system: System) -> float:
        return sum(self.energy(system))


def _window(model, system, x0, y0, w, dt, d, controls, corr, s0, record=None):
    return integrate(model, system, x0, y0, w, dt, d, controls, scheme="fundamental",
                     frozen=(x0, y0), correction=corr, record=record, s0=s0)


def construct_eps_approx(K: ConstraintOracle, model: ModelSpec, t: float, T: float, xi, eta,
                         eps: float, n_mc: int = 32, seed: int = 0, dt: float | None = None,
                         max_fix: int = 8) -> EpsApproxRecord:
    """Greedy Step-1 construction iterated to the horizon.

    At each node every control is tried over a window of length delta
    (initially the largest step multiple <= eps); each sample keeps the control
    whose end point lies closest to K.  The projection residual p is fed back
    as the constant correction p/delta, refined a few times so the corrected
    end point itself lands in K.  delta is halved until E||p||^2 <= eps delta^2
    and E||X(s)-X(t_k)||^2 <= eps on the window.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not T > t:
        raise ValueError("need T > t")
    _require_inside(K, xi, eta)
    system = K.system
    if dt is None:
        stable = system_stable_step(system, model)
        dt = (T - t) / math.ceil((T - t) / stable - 1e-12)
    M = int(round((T - t) / dt))
    seeds = mc_seeds(seed, n_mc)
    path = sample_brownian_batch(t, T, dt, seeds)
    w_all = path.values
    S = n_mc
    nctrl = len(model.controls)
    norm_sq = system.norm_sq

    x = np.broadcast_to(np.asarray(xi, dtype=float), (S, system.grid_x.dim)).copy()
    y = (np.full(S, float(eta)) if system.scalar_y
         else np.broadcast_to(np.asarray(eta, dtype=float), (S, system.grid_y.dim)).copy())
    x0, y0 = x.copy(), y.copy()
    node_steps, node_x, node_y = [0], [x.copy()], [y.copy()]
    p_xs, p_ys, end_xs, end_ys = [], [], [], []
    ctrl = np.zeros((S, M), dtype=np.int64)
    tau_gap = np.zeros(M + 1)
    init_gap = np.zeros(M + 1)
    d_max = max(1, int(math.floor(eps / dt + 1e-9)))
    m, complete, diag = 0, True, ""

    while m < M:
        d = min(d_max, M - m)
        accepted = False
        while d >= 1:
            w = w_all[:, m:m + d + 1]
            s0 = t + m * dt
            ends = []
            for c in range(nctrl):
                rx, ry, _, _ = _window(model, system, x, y, w, dt, d, c, None, s0, record=[d])
                ends.append(K.distance_sq(rx[0], ry[0]))
            choice = np.argmin(np.stack(ends), axis=0)
            sched = np.repeat(choice[:, None], d, axis=1)
            rx, ry, _, _ = _window(model, system, x, y, w, dt, d, sched, None, s0, record=[d])
            px, py = K.project(rx[0], ry[0])
            px, py = px - rx[0], py - ry[0]
            delta = d * dt
            for _ in range(max_fix):
                if not np.any(px) and not np.any(py):
                    break
                rx, ry, _, _ = _window(model, system, x, y, w, dt, d, sched,
                                       (px / delta, py / delta), s0, record=[d])
                if np.all(K.contains(rx[0], ry[0], tol=1e-13)):
                    break
                qx, qy = K.project(rx[0], ry[0])
                px, py = px + (qx - rx[0]), py + (qy - ry[0])
            corr = None if not (np.any(px) or np.any(py)) else (px / delta, py / delta)
            xs, ys, _, _ = _window(model, system, x, y, w, dt, d, sched, corr, s0)
            dev = norm_sq(xs - x, ys - y).mean(axis=1)
            budget_ok = float(np.mean(norm_sq(px, py))) <= eps * delta**2
            if budget_ok and dev.max() <= eps:
                accepted = True
                break
            d //= 2
        if not accepted:
            complete = False
            diag = (f"no admissible window at s={t + m * dt:.6g}: correction or delay budget "
                    f"exceeded down to the integrator step (quasi-tangency empirically violated)")
            break
        end_x, end_y = xs[-1], ys[-1]
        new_x, new_y = end_x, end_y
        if not np.all(K.contains(end_x, end_y)):
            new_x, new_y = K.project(end_x, end_y)
        ctrl[:, m:m + d] = choice[:, None]
        tau_gap[m:m + d + 1] = dev
        init_gap[m:m + d + 1] = norm_sq(xs - x0, ys - y0).mean(axis=1)
        p_xs.append(px)
        p_ys.append(py)
        end_xs.append(end_x)
        end_ys.append(end_y)
        x, y = np.array(new_x), np.array(new_y)
        m += d
        node_steps.append(m)
        node_x.append(x.copy())
        node_y.append(y.copy())
        tau_gap[m] = 0.0  # T_bar or the next node is its own tau

    stack = lambda seq, like: np.array(seq) if seq else np.zeros((0,) + like.shape)
    return EpsApproxRecord(
        t=t, T=T, T_bar=t + m * dt, eps=float(eps), dt=dt, node_steps=node_steps,
        controls=ctrl[:, :m], p_x=stack(p_xs, x), p_y=stack(p_ys, y),
        node_x=np.array(node_x), node_y=np.array(node_y),
        end_x=stack(end_xs, x), end_y=stack(end_ys, y),
        tau_gap=tau_gap[: m + 1], initial_gap=init_gap[: m + 1], path=path,
        complete=complete, diagnostic=diag, seeds=[seed],
    )


def scaled_corrections(rec: EpsApproxRecord, factor: float) -> EpsApproxRecord:
    """Copy of ``rec`` with every correction multiplied by ``factor`` (states untouched)."""
    return replace(rec, p_x=rec.p_x * factor, p_y=rec.p_y * factor)


@dataclass
class ClauseResult:
    passed: bool
    slack: float | None
    detail: str = ""


def validate_eps_approx(rec: EpsApproxRecord, K: ConstraintOracle, model: ModelSpec,
                        eps: float | None = None, *, reintegrate: bool = True,
                        residual_tol: float = 1e-8) -> dict[int, ClauseResult]:
    """Check the six defining clauses.  Slack is budget minus measured value (>= 0 passes)."""
    eps = rec.eps if eps is None else float(eps)
    system = K.system
    out: dict[int, ClauseResult] = {}
    ok1 = rec.t <= rec.T_bar <= rec.T + 1e-12
    out[1] = ClauseResult(ok1, rec.T - rec.T_bar, "t <= T_bar <= T")

    steps = np.arange(rec.node_steps[-1] + 1)
    tau = rec.tau
    delay = float(np.max(steps - tau)) * rec.dt if steps.size else 0.0
    ok2 = bool(np.all(np.diff(tau) >= 0) and np.all(tau <= steps) and delay <= eps + 1e-12)
    out[2] = ClauseResult(ok2, eps - delay, "tau non-decreasing, tau(s) <= s, s - tau(s) <= eps")

    ctrl = rec.controls
    ok3 = bool(ctrl.size == 0 or (ctrl.min() >= 0 and ctrl.max() < len(model.controls)))
    out[3] = ClauseResult(ok3, None, "piecewise-constant controls valued in U")

    ex, ey = rec.energy(system)
    budget = eps * (rec.T_bar - rec.t)
    finite = bool(np.all(np.isfinite(rec.p_x)) and np.all(np.isfinite(rec.p_y)))
    ok4 = finite and ex <= budget * (1 + 1e-12) and ey <= budget * (1 + 1e-12)
    out[4] = ClauseResult(ok4, budget - max(ex, ey),
                          f"E int ||phi_1||^2 = {ex:.3e}, E int ||phi_2||^2 = {ey:.3e}, budget {budget:.3e}")

    residual = 0.0
    if reintegrate:
        w_all = rec.path.values
        for k in range(len(rec.node_steps) - 1):
            a, b = rec.node_steps[k], rec.node_steps[k + 1]
            delta = (b - a) * rec.dt
            corr = (rec.p_x[k] / delta, rec.p_y[k] / delta)
            rx, ry, _, _ = _window(model, system, rec.node_x[k], rec.node_y[k], w_all[:, a:b + 1],
                                   rec.dt, b - a, rec.controls[:, a:b], corr, rec.t + a * rec.dt,
                                   record=[b - a])
            scale = 1.0 + float(np.max(np.sqrt(system.norm_sq(rec.node_x[k + 1], rec.node_y[k + 1]))))
            jump = np.sqrt(system.norm_sq(rx[0] - rec.node_x[k + 1], ry[0] - rec.node_y[k + 1]))
            residual = max(residual, float(np.max(jump)) / scale)
    ok5 = residual <= residual_tol
    out[5] = ClauseResult(ok5, residual_tol - residual,
                          "measurability: not applicable (adaptedness dropped); "
                          f"max relative re-integration residual {residual:.2e}")

    inside = all(bool(np.all(K.contains(nx, ny))) for nx, ny in zip(rec.node_x, rec.node_y))
    worst = float(np.max(rec.tau_gap)) if rec.tau_gap.size else 0.0
    ok6 = inside and worst <= eps
    out[6] = ClauseResult(ok6, eps - worst,
                          f"nodes in K: {inside}; max_s E||X(tau(s)) - X(s)||^2 = {worst:.3e}")
    return out


def report_passed(report: dict[int, ClauseResult]) -> bool:
    return all(r.passed for r in report.values())


# -- near viability --------------------------------------------------------------


@dataclass
class GapReport:
    gap: float
    by_policy: dict
    eps: float
    n_mc: int
    seeds: list


def _restarted_gap(K, model, system, path, dt, node_steps, controls, t, starts=None, xi=None, eta=None):
    """max over steps of sqrt(E dist_K^2) for the uncorrected flow restarted at each node."""
    w_all = path.values
    worst = 0.0
    x, y = (starts[0] if starts is not None else (xi, eta))
    for k in range(len(node_steps) - 1):
        a, b = node_steps[k], node_steps[k + 1]
        if starts is not None:
            x, y = starts[k]
        rx, ry, _, _ = integrate(model, system, x, y, w_all[:, a:b + 1], dt, b - a, controls[:, a:b],
                                 scheme="rescaled", s0=t + a * dt)
        d2 = K.distance_sq(rx, ry).mean(axis=1)
        worst = max(worst, float(np.sqrt(d2.max())))
        x, y = K.project(rx[-1], ry[-1])
    return worst


def near_viability_gap(K: ConstraintOracle, model: ModelSpec, t: float, T: float, xi, eta,
                       eps: float, n_mc: int = 32, seed: int = 0, dt: float | None = None,
                       record: EpsApproxRecord | None = None) -> GapReport:
    """min over {greedy record at eps} U {constant controls, nodes every eps} of the restarted gap."""
    _require_inside(K, xi, eta)
    system = K.system
    if record is None:
        record = construct_eps_approx(K, model, t, T, xi, eta, eps, n_mc, seed, dt)
    dt, path = record.dt, record.path
    M = int(round((T - t) / dt))
    by_policy = {}
    if record.node_steps[-1] > 0:
        starts = list(zip(record.node_x, record.node_y))
        by_policy["greedy"] = _restarted_gap(K, model, system, path, dt, record.node_steps,
                                             record.controls, t, starts=starts)
    d = max(1, int(math.floor(eps / dt + 1e-9)))
    nodes = list(range(0, M, d)) + [M]
    for c in range(len(model.controls)):
        sched = np.full((n_mc, M), c, dtype=np.int64)
        by_policy[f"constant:{c}"] = _restarted_gap(K, model, system, path, dt, nodes, sched, t,
                                                    xi=xi, eta=eta)
    return GapReport(min(by_policy.values()), by_policy, float(eps), n_mc, [seed])


# -- initial-data estimate -------------------------------------------------------


@dataclass
class InitialEstimate:
    lags: np.ndarray
    values: np.ndarray
    slope: float | None
    c_emp: float
    passed: bool


def appendix_initial_estimate(rec: EpsApproxRecord, system: System, xi, eta,
                              lags: Sequence[float] | None = None) -> InitialEstimate:
    """E||X(s)-xi||^2 + E||Y(s)-eta||^2 against (s-t) along the record.

    C_emp is the smallest C with value <= C (1 + ||xi||_L2^2 + ||eta||^2 + energy) (s-t).
    """
    horizon = rec.T_bar - rec.t
    if lags is None:
        lags = [2.0**-k for k in range(3, 11) if 2.0**-k <= horizon and 2.0**-k >= rec.dt]
    steps = [int(round(s / rec.dt)) for s in lags]
    vals = rec.initial_gap[steps]
    data = float(system.grid_x.norm_sq(xi, "L2"))
    data += float(np.asarray(eta) ** 2) if system.scalar_y else float(system.grid_y.norm_sq(eta, "L2"))
    factor = 1.0 + data + rec.correction_energy(system)
    lags = np.asarray(lags, dtype=float)
    c_emp = float(np.max(vals / (factor * lags))) if len(lags) else 0.0
    if np.all(vals == 0):
        return InitialEstimate(lags, vals, None, 0.0, True)
    slope, _ = loglog_fit(lags, vals)
    return InitialEstimate(lags, vals, slope, c_emp, slope >= 0.9)
