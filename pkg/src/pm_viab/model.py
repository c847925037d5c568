"""Nonlinearities beta_i, coupling maps f_i, finite control sets and their validators."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .spatial import GridDomain

VALIDATION_SLACK = 1e-9


# -- fields from specs -----------------------------------------------------------


def make_field(grid: GridDomain | None, spec: Any) -> np.ndarray | float:
    """Build a field (or a scalar when ``grid`` is None) from a small declarative spec.

    Accepted specs: ``None``/``"zero"``; a number (scalar spaces only);
    ``{"mode": [j, k], "scale": s}`` (L2-unit eigenfield); ``{"hminus1_mode": [j, k]}``
    (H^-1-unit eigenfield); ``{"bump": {"center": [x, y], "width": w}}``; or a
    list of specs, which are summed.
    """
    if grid is None:
        if spec is None or spec == "zero":
            return 0.0
        if isinstance(spec, (int, float)):
            return float(spec)
        raise ValueError(f"scalar component needs a number, got {spec!r}")
    if spec is None or spec == "zero":
        return np.zeros(grid.dim)
    if isinstance(spec, list):
        return sum((make_field(grid, s) for s in spec), np.zeros(grid.dim))
    if not isinstance(spec, dict):
        raise ValueError(f"cannot build a field from {spec!r}")
    scale = float(spec.get("scale", 1.0))
    if "mode" in spec:
        j, k = spec["mode"]
        return scale * grid.eigenvector(j, k)
    if "hminus1_mode" in spec:
        j, k = spec["hminus1_mode"]
        return scale * np.sqrt(grid.eigenvalues[j - 1, k - 1]) * grid.eigenvector(j, k)
    if "bump" in spec:
        b = spec["bump"]
        (cx, cy), w = b.get("center", (0.5, 0.5)), float(b.get("width", 0.1))
        x, y = grid.nodes
        envelope = np.sin(np.pi * x) * np.sin(np.pi * y)
        return scale * (envelope * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * w * w))).ravel()
    raise ValueError(f"unknown field spec keys {sorted(spec)}")


# -- nonlinearities --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Nonlinearity:
    kind: str
    params: dict
    lip: float
    mono: float
    fn: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    may_be_zero: bool = False

    def __call__(self, r):
        return self.fn(np.asarray(r, dtype=float))

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero"


@dataclass(frozen=True)
class Certificate:
    lip_est: float
    mono_est: float | None
    passed: bool
    n_samples: int


def _beta_family(kind: str, p: dict):
    if kind == "linear":
        a = float(p.get("a", 1.0))
        return (lambda r: a * r), a, a
    if kind == "sine":
        a, b = float(p.get("a", 1.0)), float(p.get("b", 0.5))
        return (lambda r: a * r + b * np.sin(r)), a + abs(b), a - abs(b)
    if kind == "saturated_power":
        alpha, lip = float(p["alpha"]), float(p["lip"])
        m, R = float(p.get("m", 2.0)), float(p.get("R", 1.0))
        if m < 1 or R <= 0 or lip < alpha:
            raise ValueError("saturated_power needs m >= 1, R > 0 and lip >= alpha")
        kappa = (lip - alpha) / (m * R ** (m - 1))
        return (lambda r: alpha * r + kappa * np.sign(r) * np.minimum(np.abs(r), R) ** m), lip, alpha
    if kind == "zero":
        return (lambda r: np.zeros_like(r)), 0.0, 0.0
    raise ValueError(f"unknown nonlinearity family {kind!r}")


def make_beta(kind: str, params: dict | None = None, *, may_be_zero: bool = False,
              budget: int = 10_000) -> Nonlinearity:
    params = dict(params or {})
    fn, lip, mono = _beta_family(kind, params)
    if mono <= 0 and not (may_be_zero and kind == "zero"):
        raise ValueError(f"{kind} with {params} is not strongly monotone (alpha = {mono})")
    beta = Nonlinearity(kind, params, lip, mono, fn, may_be_zero)
    if kind != "zero":
        cert = validate_assumptions(beta, budget)
        if not cert.passed:
            raise ValueError(f"declared constants of {kind} failed validation: {cert}")
    return beta


def _sample_pairs(rng, budget: int, radius: float):
    half = budget // 2
    r = rng.uniform(-radius, radius, budget)
    s = np.empty(budget)
    s[:half] = rng.uniform(-radius, radius, half)
    gap = rng.uniform(-1, 1, budget - half) * 10.0 ** rng.uniform(-6, 0, budget - half)
    s[half:] = r[half:] + gap
    keep = r != s
    return r[keep], s[keep]


def validate_assumptions(obj, budget: int = 10_000, *, seed: int = 0,
                         declared_lip: float | None = None,
                         declared_mono: float | None = None,
                         may_be_zero: bool | None = None) -> Certificate:
    """Empirical Lipschitz / monotonicity constants on sampled pairs.

    ``obj`` is a :class:`Nonlinearity`, a :class:`CouplingMap`, or a bare
    callable r -> beta(r).  A bare callable passes only if its sampled secant
    slopes are bounded below by a positive constant.
    """
    if budget < 10_000:
        raise ValueError("sample budget must be at least 1e4")
    if isinstance(obj, CouplingMap):
        return _validate_coupling(obj, budget, seed)
    rng = np.random.default_rng(seed)
    radius = 10.0
    if isinstance(obj, Nonlinearity):
        declared_lip = obj.lip if declared_lip is None else declared_lip
        declared_mono = obj.mono if declared_mono is None else declared_mono
        may_be_zero = obj.may_be_zero if may_be_zero is None else may_be_zero
        radius = max(radius, 2.0 * float(obj.params.get("R", 0.0)))
    r, s = _sample_pairs(rng, budget, radius)
    br, bs = obj(r), obj(s)
    slopes = (br - bs) / (r - s)
    # rounding in the secant of near-coincident pairs
    err = 4 * np.finfo(float).eps * (np.abs(br) + np.abs(bs) + 1.0) / np.abs(r - s) + VALIDATION_SLACK
    lip_est, mono_est = float(np.max(np.abs(slopes))), float(np.min(slopes))
    ok = True
    if declared_mono is not None:
        ok &= bool(np.all(slopes >= declared_mono - err))
    if declared_lip is not None:
        ok &= bool(np.all(np.abs(slopes) <= declared_lip + err))
    if not may_be_zero:
        ok &= mono_est > 0
    return Certificate(lip_est, mono_est, bool(ok), int(r.size))


# -- controls --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ControlSet:
    points: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.size == 0:
            raise ValueError("control set must be non-empty")
        if not np.all(np.isfinite(pts)):
            raise ValueError("control points must be finite")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def arity(self) -> int:
        return self.points.shape[1]

    def __getitem__(self, idx):
        return self.points[idx]


# -- coupling maps ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CouplingMap:
    """f(x, y, u) with values in the target space (a grid, or the reals when target is None).

    Every built-in family is affine in y, which stabilization exploits to
    evaluate all spectral truncation levels at once.
    """

    family: str
    params: dict
    lip: float
    sup0: float
    arity: int
    target: GridDomain | None = field(repr=False)
    x_space: GridDomain = field(repr=False)
    y_space: GridDomain | None = field(repr=False)
    fn: Callable = field(repr=False)
    controls: ControlSet = field(repr=False, default=None)
    lip_l2: float = 0.0
    depends_on_state: bool = True
    depends_on_y: bool = True

    def __call__(self, x, y, u):
        return self.fn(np.asarray(x, dtype=float), np.asarray(y, dtype=float),
                       np.atleast_1d(np.asarray(u, dtype=float)))

    def norm(self, v) -> np.ndarray:
        if self.target is None:
            return np.abs(v)
        return self.target.norm(v)


def _embed(src: GridDomain | None, dst: GridDomain | None, y_field):
    """Linear map from a component space into the target space and its H^-1 / L2 norms."""
    if src is None and dst is None:
        return (lambda v: v), 1.0, 1.0
    if src is None:
        g = y_field
        return (lambda v: v[..., None] * g), float(dst.norm(g)), float(dst.norm(g, "L2"))
    if dst is None:
        return None, np.nan, np.nan
    if src.n_per_dim == dst.n_per_dim:
        return (lambda v: v), 1.0, 1.0
    return (lambda v: src.transfer(v, dst)), src.transfer_norm(dst), 1.0


def make_coupling(family: str, params: dict | None, controls: ControlSet,
                  x_space: GridDomain, y_space: GridDomain | None = None,
                  component: int = 1) -> CouplingMap:
    """Build f_component.  Families: zero, decay, affine, feedback.

    * ``decay``: f = -c * (own component)
    * ``affine``: f = mx*x + my*y + sum_i u_i g_i + g0
    * ``feedback``: f = (mx - u_0)*x + my*y + g0  (u_0 is a damping gain)

    A scalar second component enters a field-valued map through ``y_field``
    (default: the H^-1-unit lowest eigenfield).
    """
    p = dict(params or {})
    target = x_space if component == 1 else y_space
    own = target
    tshape = () if target is None else (target.dim,)
    y_field = None
    if target is not None and y_space is None:
        y_field = make_field(target, p.get("y_field", {"hminus1_mode": [1, 1]}))
    ex, ex_h, ex_l2 = _embed(x_space, target, None)
    ey, ey_h, ey_l2 = _embed(y_space, target, y_field)
    m = controls.arity

    def zeros_like_batch(x, y):
        batch = np.broadcast_shapes(x.shape[:-1], y.shape[:-1] if y_space is not None else y.shape)
        return np.zeros(batch + tshape)

    if family == "zero":
        fn = lambda x, y, u: zeros_like_batch(x, y)
        return CouplingMap(family, p, 0.0, 0.0, m, target, x_space, y_space, fn, controls, 0.0, False, False)

    if family == "decay":
        c = float(p["c"])
        if component == 1:
            fn = lambda x, y, u: -c * x
        else:
            fn = lambda x, y, u: -c * y
        return CouplingMap(family, p, abs(c), 0.0, m, target, x_space, y_space, fn, controls,
                           abs(c), True, component == 2)

    if family not in ("affine", "feedback"):
        raise ValueError(f"unknown coupling family {family!r}")

    mx, my = float(p.get("mx", 0.0)), float(p.get("my", 0.0))
    if mx != 0.0 and ex is None:
        raise ValueError("a scalar-valued coupling cannot depend on the field component x")
    g0 = make_field(target, p.get("g0"))
    if family == "affine":
        gs = p.get("g", [None] * m)
        if len(gs) != m:
            raise ValueError(f"affine coupling needs {m} control fields, got {len(gs)}")
        g = np.array([make_field(target, s) for s in gs], dtype=float)  # (m,) + tshape
        gain = lambda u: mx * np.ones(u.shape[:-1])
        forcing = lambda u: np.tensordot(u, g, axes=([-1], [0])) + g0
        x_gains = [abs(mx)]
    else:
        gain = lambda u: mx - u[..., 0]
        forcing = lambda u: np.broadcast_to(g0, u.shape[:-1] + tshape)
        x_gains = list(np.abs(mx - controls.points[:, 0]))

    for arr in (g0,) + ((g,) if family == "affine" else ()):
        if not np.all(np.isfinite(arr)):
            raise ValueError("coupling fields must be finite (L2 restriction unbounded)")

    def fn(x, y, u):
        out = forcing(u)
        gx = gain(u)
        if np.any(gx != 0.0):
            xt = ex(x)
            out = out + (gx[..., None] * xt if tshape else gx * xt)
        if my != 0.0:
            out = out + my * ey(y)
        return out

    lip = max(max(x_gains) * (ex_h if ex is not None else 0.0), abs(my) * ey_h if my else 0.0)
    lip_l2 = max(max(x_gains) * (ex_l2 if ex is not None else 0.0), abs(my) * ey_l2 if my else 0.0)
    if not np.isfinite(lip_l2):
        raise ValueError("coupling has unbounded L2 restriction")
    forcing_pts = forcing(controls.points)
    if target is None:
        sup0 = float(np.max(np.abs(forcing_pts)))
    else:
        sup0 = float(np.max(target.norm(forcing_pts)))
    state = bool(any(x_gains)) or my != 0.0
    return CouplingMap(family, p, float(lip), sup0, m, target, x_space, y_space, fn, controls,
                       float(lip_l2), state, my != 0.0)


def _random_state(rng, grid: GridDomain | None, n: int) -> np.ndarray:
    if grid is None:
        return rng.standard_normal(n)
    white = rng.standard_normal((n, grid.dim))
    coef = grid.coefficients(white) / grid.eigenvalues ** rng.uniform(0, 1.5, (n, 1, 1))
    return grid.synthesize(coef)


def _norm(grid, v, metric="Hminus1"):
    return np.abs(v) if grid is None else grid.norm(v, metric)


def _validate_coupling(f: CouplingMap, budget: int, seed: int) -> Certificate:
    """Lipschitz ratio over random state pairs (H^-1 and L2) plus the linear growth bound."""
    rng = np.random.default_rng(seed)
    n = max(64, budget // 100)
    x, x2 = _random_state(rng, f.x_space, n), _random_state(rng, f.x_space, n)
    y, y2 = _random_state(rng, f.y_space, n), _random_state(rng, f.y_space, n)
    u = f.controls.points[rng.integers(len(f.controls), size=n)]
    fx = f(x, y, u)
    ok, lip_est = True, 0.0
    for metric, bound in (("Hminus1", f.lip), ("L2", f.lip_l2)):
        num = _norm(f.target, fx - f(x2, y2, u), metric)
        den = _norm(f.x_space, x - x2, metric) + _norm(f.y_space, y - y2, metric)
        ratio = float(np.max(num / den))
        ok &= ratio <= bound * (1 + 1e-12) + VALIDATION_SLACK
        if metric == "Hminus1":
            lip_est = ratio
    at_zero = _norm(f.target, f(np.zeros_like(x), np.zeros_like(y), u))
    ok &= bool(np.all(at_zero <= f.sup0 * (1 + 1e-12) + VALIDATION_SLACK))
    rhs = f.sup0 + f.lip * (_norm(f.x_space, x) + _norm(f.y_space, y))
    ok &= bool(np.all(_norm(f.target, fx) <= rhs * (1 + 1e-12) + VALIDATION_SLACK))
    return Certificate(lip_est, None, bool(ok), n)


@dataclass(frozen=True, eq=False)
class ModelSpec:
    beta1: Nonlinearity
    beta2: Nonlinearity
    f1: CouplingMap
    f2: CouplingMap
    controls: ControlSet

    @property
    def f_lip(self) -> float:
        return max(self.f1.lip, self.f2.lip)

    @property
    def f_sup0(self) -> float:
        return max(self.f1.sup0, self.f2.sup0)

    @property
    def state_dependent(self) -> bool:
        return self.f1.depends_on_state or self.f2.depends_on_state
