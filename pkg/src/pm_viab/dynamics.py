"""Integration of the rescaled system, its frozen-forcing Euler scheme, and rate studies.

State conventions: ``x`` is (S, N1); ``y`` is (S, N2) or (S,) in scalar mode.
Internally the field components are carried in the group's modal
coordinates, where Gamma(t, s) is diagonal, so each explicit step costs one
transform into physical space (to evaluate beta and f) and one back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .drift import BrownianPath, DriftGroup, mc_seeds, sample_brownian_batch
from .model import ModelSpec, Nonlinearity
from .spatial import GridDomain

STABILITY_SAFETY = 0.5
BLOWUP_SLACK = 2.0


class BlowUpError(RuntimeError):
    """The a-priori H^-1 bound was exceeded; the step size is almost certainly too large."""

    def __init__(self, step: int, time: float, norm: float, bound: float):
        super().__init__(
            f"blow-up at step {step} (s={time:.6g}): ||x||+||y|| = {norm:.4g} exceeds bound {bound:.4g}"
        )
        self.step, self.time, self.norm, self.bound = step, time, norm, bound


@dataclass(frozen=True, eq=False)
class System:
    """Grids and noise groups of the two components; ``grid_y is None`` selects scalar mode."""

    grid_x: GridDomain
    group_x: DriftGroup
    grid_y: GridDomain | None = None
    group_y: DriftGroup | None = None

    @property
    def scalar_y(self) -> bool:
        return self.grid_y is None

    def norm_sq_x(self, x) -> np.ndarray:
        return self.grid_x.norm_sq(x)

    def norm_sq_y(self, y) -> np.ndarray:
        return np.asarray(y, dtype=float) ** 2 if self.scalar_y else self.grid_y.norm_sq(y)

    def norm_sq(self, x, y) -> np.ndarray:
        return self.norm_sq_x(x) + self.norm_sq_y(y)


def stable_step(grid: GridDomain, beta: Nonlinearity) -> float:
    """Explicit-Euler step 0.5 / ([beta]_1 lambda_max)."""
    if beta.lip <= 0:
        return math.inf
    return STABILITY_SAFETY / (beta.lip * grid.lambda_max)


def system_stable_step(system: System, model: ModelSpec) -> float:
    dt = stable_step(system.grid_x, model.beta1)
    if not system.scalar_y:
        dt = min(dt, stable_step(system.grid_y, model.beta2))
    return dt


@dataclass(eq=False)
class Trajectory:
    """States at recorded nodes.  Arrays carry a sample axis unless the run was single-path."""

    times: np.ndarray
    x: np.ndarray
    y: np.ndarray
    controls: np.ndarray
    t0: float
    dt: float
    increments: np.ndarray = field(repr=False)  # W(s_k) - W(t0) at the recorded nodes
    scheme: str = "rescaled"
    stable_dt: float = math.nan
    single: bool = False

    def node(self, k: int):
        return self.x[k], self.y[k]


# -- the integrator ------------------------------------------------------------


def _as_batch(v, n_samples: int, dim: int | None) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    shape = (n_samples,) if dim is None else (n_samples, dim)
    return np.broadcast_to(v, shape).copy()


def _control_fn(controls, n_samples: int, n_steps: int):
    if callable(controls):
        return controls
    arr = np.asarray(controls)
    if arr.ndim == 0:
        idx = np.full(n_samples, int(arr))
        return lambda m, s, X, Y: idx
    if arr.ndim == 1:
        if arr.shape[0] < n_steps:
            raise ValueError("control schedule shorter than the integration window")
        return lambda m, s, X, Y: np.full(n_samples, int(arr[m]))
    if arr.shape[1] < n_steps:
        raise ValueError("control schedule shorter than the integration window")
    return lambda m, s, X, Y: arr[:, m]


def integrate(model: ModelSpec, system: System, x0, y0, w: np.ndarray, dt: float,
              n_steps: int, controls=0, *, scheme: str = "rescaled", frozen=None,
              correction=None, record: Sequence[int] | None = None, s0: float = 0.0,
              rel_s0: float = 0.0, on_step: Callable | None = None):
    """Explicit Euler for the conjugated system on n_steps steps of size dt.

    ``w`` is (S, n_steps+1): accumulated noise W(s_m) - W(t) relative to the
    origin t of the conjugation, which may precede the integration start.
    ``scheme`` is "rescaled" (forcing Gamma(s,t) f(X, Y, u)) or "fundamental"
    (forcing f(frozen, u) + correction, unconjugated).  Returns recorded
    (x, y) at the steps in ``record`` and the (S, n_steps) control indices.
    """
    if scheme not in ("rescaled", "fundamental"):
        raise ValueError(f"unknown scheme {scheme!r}")
    S = w.shape[0]
    gx, gy = system.group_x, system.group_y
    x = _as_batch(x0, S, system.grid_x.dim)
    y = _as_batch(y0, S, None if system.scalar_y else system.grid_y.dim)
    record = sorted(set(range(n_steps + 1) if record is None else record))
    pick = _control_fn(controls, S, n_steps)
    pts = model.controls.points

    if scheme == "fundamental":
        xf, yf = (x, y) if frozen is None else (
            _as_batch(frozen[0], S, system.grid_x.dim),
            _as_batch(frozen[1], S, None if system.scalar_y else system.grid_y.dim))
    cx = cy = None
    if correction is not None:
        cx, cy = correction
    forcing_cache: dict[int, tuple] = {}

    def frozen_forcing(idx):
        # f(frozen state, u) (+ correction), transformed once per control value
        out_x = np.empty_like(wx)
        out_y = np.empty_like(y) if system.scalar_y else np.empty_like(wy)
        for c in np.unique(idx):
            if c not in forcing_cache:
                fx = model.f1(xf, yf, np.broadcast_to(pts[c], (S, pts.shape[1])))
                fy = model.f2(xf, yf, np.broadcast_to(pts[c], (S, pts.shape[1])))
                if cx is not None:
                    fx = fx + cx
                    fy = fy + cy
                forcing_cache[c] = (gx.to_modal(fx), fy if system.scalar_y else gy.to_modal(fy))
            sel = idx == c
            out_x[sel] = forcing_cache[c][0][sel]
            out_y[sel] = forcing_cache[c][1][sel]
        return out_x, out_y

    wx = gx.to_modal(x)
    wy = None if system.scalar_y else gy.to_modal(y)
    if not gx.is_trivial:
        wx = wx.astype(complex)
    if wy is not None and not gy.is_trivial:
        wy = wy.astype(complex)

    # a-priori bound on ||x|| + ||y|| (diffusion is H^-1 non-expansive at the CFL step)
    lip, sup0 = model.f_lip, model.f_sup0
    n0 = np.sqrt(system.norm_sq_x(x)) + np.sqrt(system.norm_sq_y(y))
    nf = 0.0
    if scheme == "fundamental":
        nf = np.sqrt(system.norm_sq_x(xf)) + np.sqrt(system.norm_sq_y(yf))
    ncorr = 0.0
    if cx is not None:
        ncorr = np.sqrt(system.norm_sq_x(cx)) + np.sqrt(system.norm_sq_y(cy))

    rec_x, rec_y = [], []
    ctrl = np.zeros((S, n_steps), dtype=np.int64)

    def physical(m):
        X = gx.from_modal(gx.phase(w[:, m]) * wx)
        if system.scalar_y:
            return X, y
        return X, gy.from_modal(gy.phase(w[:, m]) * wy)

    for m in range(n_steps + 1):
        need_record = m in record
        if need_record:
            rec_x.append(gx.from_modal(wx))
            rec_y.append(y.copy() if system.scalar_y else gy.from_modal(wy))
        if m == n_steps:
            break
        s = s0 + m * dt
        X, Y = physical(m)
        idx = np.asarray(pick(m, s, X, Y), dtype=np.int64)
        ctrl[:, m] = idx
        if on_step is not None:
            on_step(m, s, X, Y, idx)
        u = pts[idx]
        dx = -system.grid_x.laplacian_apply(model.beta1(X))
        back_x = gx.phase(-w[:, m])
        if scheme == "rescaled":
            fx = model.f1(X, Y, u)
            fy = model.f2(X, Y, u)
            wx = wx + dt * (back_x * gx.to_modal(dx + fx))
            if system.scalar_y:
                y = y + dt * fy
            else:
                dy = -system.grid_y.laplacian_apply(model.beta2(Y))
                wy = wy + dt * (gy.phase(-w[:, m]) * gy.to_modal(dy + fy))
        else:
            fx_m, fy_m = frozen_forcing(idx)
            wx = wx + dt * (back_x * gx.to_modal(dx) + fx_m)
            if system.scalar_y:
                y = y + dt * fy_m
            else:
                dy = -system.grid_y.laplacian_apply(model.beta2(Y))
                wy = wy + dt * (gy.phase(-w[:, m]) * gy.to_modal(dy) + fy_m)
        el = rel_s0 + (m + 1) * dt
        now = np.linalg.norm(wx, axis=-1) + (np.abs(y) if system.scalar_y else np.linalg.norm(wy, axis=-1))
        bound = BLOWUP_SLACK * math.exp(min(2 * lip * el, 700.0)) * (n0 + (2 * sup0 + 2 * lip * nf + ncorr) * el) + 1e-12
        bad = now > bound
        if np.any(bad) or not np.all(np.isfinite(now)):
            k = int(np.argmax(~np.isfinite(now) | bad))
            raise BlowUpError(m + 1, s + dt, float(now[k]), float(np.broadcast_to(bound, now.shape)[k]))
    return np.array(rec_x), np.array(rec_y), ctrl, record


def _path_increments(path: BrownianPath, t: float, dt: float, n_steps: int | None):
    ratio = dt / path.step
    k = int(round(ratio))
    if k < 1 or abs(ratio - k) > 1e-9 * max(1.0, ratio):
        raise ValueError(f"dt={dt} is not an integer multiple of the path step {path.step}")
    start = (t - path.t0) / path.step
    i0 = int(round(start))
    if abs(start - i0) > 1e-6:
        raise ValueError("start time is not on the path grid")
    vals = np.atleast_2d(path.values)
    w = vals[:, i0::k]
    avail = w.shape[1] - 1
    if n_steps is None:
        n_steps = avail
    if n_steps > avail:
        raise ValueError("Brownian path does not cover the integration window")
    w = w[:, : n_steps + 1]
    return w - w[:, :1], n_steps


def _solve(scheme, model, system, t, xi, eta, controls, path, dt, until, record, frozen=None):
    n_steps = None if until is None else int(round((until - t) / dt))
    if n_steps is not None and abs(t + n_steps * dt - until) > 1e-9 * max(1.0, until):
        raise ValueError("the horizon is not a whole number of steps")
    w, n_steps = _path_increments(path, t, dt, n_steps)
    rx, ry, ctrl, rec = integrate(model, system, xi, eta, w, dt, n_steps, controls,
                                  scheme=scheme, frozen=frozen, record=record, s0=t)
    rec = np.asarray(rec)
    single = path.values.ndim == 1
    traj = Trajectory(times=t + dt * rec, x=rx, y=ry, controls=ctrl, t0=t, dt=dt,
                      increments=w[:, rec].T, scheme=scheme,
                      stable_dt=system_stable_step(system, model), single=single)
    if single:
        traj.x, traj.y, traj.controls = rx[:, 0], ry[:, 0], ctrl[0]
        traj.increments = traj.increments[:, 0]
    return traj


def solve_rescaled(model: ModelSpec, system: System, t: float, xi, eta, controls,
                   path: BrownianPath, dt: float, *, until: float | None = None,
                   record: Sequence[int] | None = None) -> Trajectory:
    """Forward Euler for the random-deterministic system with forcing Gamma(s,t) f(X, Y, u)."""
    return _solve("rescaled", model, system, t, xi, eta, controls, path, dt, until, record)


def solve_euler_fundamental(model: ModelSpec, system: System, t: float, xi, eta, controls,
                            path: BrownianPath, dt: float, *, until: float | None = None,
                            record: Sequence[int] | None = None) -> Trajectory:
    """Same diffusion as :func:`solve_rescaled`, forcing frozen at f(xi, eta, u(s))."""
    return _solve("fundamental", model, system, t, xi, eta, controls, path, dt, until, record,
                  frozen=(xi, eta))


def recover_original(traj: Trajectory, system: System) -> Trajectory:
    """X(s) = Gamma_1(t, s) x(s), Y(s) = Gamma_2(t, s) y(s)."""
    inc = traj.increments
    X = system.group_x.apply(inc, traj.x) if not system.group_x.is_trivial else traj.x.copy()
    if system.scalar_y or system.group_y.is_trivial:
        Y = traj.y.copy()
    else:
        Y = system.group_y.apply(inc, traj.y)
    return Trajectory(traj.times, X, Y, traj.controls, traj.t0, traj.dt, traj.increments,
                      traj.scheme + ":original", traj.stable_dt, traj.single)


# -- rate studies --------------------------------------------------------------


@dataclass
class RateReport:
    epsilons: np.ndarray
    errors: np.ndarray
    stderr: np.ndarray
    slope: float | None
    intercept: float | None
    c_emp: float | None
    exponent: float
    n_mc: int
    seeds: list
    wide_ci: bool = False
    label: str = ""

    def summary(self) -> dict:
        return {"label": self.label, "slope": self.slope, "intercept": self.intercept,
                "C_emp": self.c_emp, "exponent": self.exponent, "n_mc": self.n_mc,
                "seeds": list(self.seeds), "wide_ci": self.wide_ci}


def loglog_fit(x, y) -> tuple[float, float]:
    slope, intercept = np.polyfit(np.log(x), np.log(y), 1)
    return float(slope), float(intercept)


def _report(epsilons, samples, exponent, n_mc, seeds, label) -> RateReport:
    eps = np.asarray(epsilons, dtype=float)
    errors = samples.mean(axis=1)
    stderr = samples.std(axis=1, ddof=1) / math.sqrt(samples.shape[1])
    if np.all(errors == 0):
        return RateReport(eps, errors, stderr, None, None, 0.0, exponent, n_mc, seeds, False, label)
    slope, intercept = loglog_fit(eps, errors)
    c_emp = float(np.max(errors / eps**exponent))
    wide = bool(np.any(stderr > 0.25 * errors))
    return RateReport(eps, errors, stderr, slope, intercept, c_emp, exponent, n_mc, seeds, wide, label)


def rate_step(system: System, model: ModelSpec, epsilons: Sequence[float]) -> float:
    """Largest stable step dividing the smallest epsilon (so every epsilon is a node)."""
    e_min = min(epsilons)
    return e_min / math.ceil(e_min / system_stable_step(system, model) - 1e-12)


def _check_eps(epsilons, dt):
    steps = [e / dt for e in epsilons]
    out = [int(round(s)) for s in steps]
    if any(abs(a - b) > 1e-6 for a, b in zip(steps, out)):
        raise ValueError("epsilons must be whole multiples of dt")
    return out


def prop1_rate(model: ModelSpec, system: System, xi, eta, t: float, epsilons: Sequence[float],
               n_mc: int, seed: int = 0, *, control: int = 0, dt: float | None = None) -> RateReport:
    """E ||x_hat(t+eps) - xi||^2 + E ||y_hat(t+eps) - eta||^2 for each epsilon."""
    epsilons = sorted(epsilons, reverse=True)
    dt = rate_step(system, model, epsilons) if dt is None else dt
    steps = _check_eps(epsilons, dt)
    seeds = mc_seeds(seed, n_mc)
    path = sample_brownian_batch(t, t + epsilons[0], dt, seeds)
    traj = solve_euler_fundamental(model, system, t, xi, eta, control, path, dt, record=steps)
    # nodes come back in increasing time, epsilons are decreasing
    dev = system.norm_sq(traj.x[::-1] - np.asarray(xi), traj.y[::-1] - np.asarray(eta))
    return _report(epsilons, dev, 1.5, n_mc, [seed], "prop1")


def prop2_rate(model: ModelSpec, system: System, xi, eta, t: float, epsilons: Sequence[float],
               n_mc: int, seed: int = 0, *, control: int = 0, dt: float | None = None,
               refine: int = 16, fine_fundamental: bool = False) -> RateReport:
    """E[||x - x_hat||^2 + ||y - y_hat||^2] at t+eps, reference x at dt/refine on the same paths.

    With ``fine_fundamental`` the Euler scheme is also integrated at dt/refine,
    so the two schemes share their time-discretization error.
    """
    epsilons = sorted(epsilons, reverse=True)
    dt = rate_step(system, model, epsilons) if dt is None else dt
    fine = dt / refine
    seeds = mc_seeds(seed, n_mc)
    path = sample_brownian_batch(t, t + epsilons[0], fine, seeds)
    steps_fine = _check_eps(epsilons, fine)
    ref = solve_rescaled(model, system, t, xi, eta, control, path, fine, record=steps_fine)
    coarse_dt = fine if fine_fundamental else dt
    steps = _check_eps(epsilons, coarse_dt)
    hat = solve_euler_fundamental(model, system, t, xi, eta, control, path, coarse_dt, record=steps)
    ref_x, ref_y, hat_x, hat_y = ref.x[::-1], ref.y[::-1], hat.x[::-1], hat.y[::-1]
    gap = system.norm_sq(ref_x - hat_x, ref_y - hat_y)
    return _report(epsilons, gap, 2.25, n_mc, [seed], "prop2")
