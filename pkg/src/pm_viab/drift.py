"""Divergence-free drift fields, the noise generator B = b.grad A^{-1}, and its group.

The discrete generator is antisymmetrized in the H^-1 metric, so e^{sB} is an
exact isometry of H^-1 for every real s.  In the scaled sine coordinates

    z_jk = <phi, e_jk>_{L2} / sqrt(lambda_jk)      (so |z| = ||phi||_{H^-1})

the generator is the real skew matrix Lambda^{-1/2} K Lambda^{-1/2}, with K the
skew part of the centered-difference operator b.grad_h.  One Hermitian
eigendecomposition of i*B_z is cached; afterwards e^{sB} costs two dense
products for any s, including one s per Monte Carlo sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.fft import dstn

from .spatial import GridDomain

BOUNDARY_TOL = 1e-12


# -- stream functions ----------------------------------------------------------


@dataclass(frozen=True)
class StreamFunction:
    """psi(x, y) with its partial derivatives; b = (d_y psi, -d_x psi)."""

    name: str
    value: Callable[[np.ndarray, np.ndarray], np.ndarray]
    d_x: Callable[[np.ndarray, np.ndarray], np.ndarray]
    d_y: Callable[[np.ndarray, np.ndarray], np.ndarray]


def _zero(x, y):
    return np.zeros(np.broadcast(x, y).shape)


def cellular(amplitude: float = 1.0, mx: int = 1, my: int = 1) -> StreamFunction:
    a, p, q = float(amplitude), int(mx) * np.pi, int(my) * np.pi
    return StreamFunction(
        f"cellular({amplitude},{mx},{my})",
        lambda x, y: a * np.sin(p * x) * np.sin(q * y),
        lambda x, y: a * p * np.cos(p * x) * np.sin(q * y),
        lambda x, y: a * q * np.sin(p * x) * np.cos(q * y),
    )


def bubble(amplitude: float = 1.0) -> StreamFunction:
    a = 16.0 * float(amplitude)
    return StreamFunction(
        f"bubble({amplitude})",
        lambda x, y: a * x * (1 - x) * y * (1 - y),
        lambda x, y: a * (1 - 2 * x) * y * (1 - y),
        lambda x, y: a * x * (1 - x) * (1 - 2 * y),
    )


STREAMS: dict[str, Callable[..., StreamFunction]] = {
    "zero": lambda: StreamFunction("zero", _zero, _zero, _zero),
    "cellular": cellular,
    "bubble": bubble,
}


def make_stream(name: str, **params) -> StreamFunction:
    try:
        factory = STREAMS[name]
    except KeyError:
        raise ValueError(f"unknown stream function {name!r}; known: {sorted(STREAMS)}") from None
    return factory(**params)


# -- drift field ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DriftField:
    """b = (d_y psi, -d_x psi) sampled on the closed (n+2)^2 grid."""

    grid: GridDomain
    stream: StreamFunction
    b_x: np.ndarray = field(repr=False)
    b_y: np.ndarray = field(repr=False)

    @property
    def interior(self) -> tuple[np.ndarray, np.ndarray]:
        return self.b_x[1:-1, 1:-1], self.b_y[1:-1, 1:-1]

    @property
    def is_zero(self) -> bool:
        return not (np.any(self.b_x) or np.any(self.b_y))

    def divergence(self) -> np.ndarray:
        """Centered-difference divergence at interior nodes, (n, n)."""
        h = self.grid.h
        return (self.b_x[2:, 1:-1] - self.b_x[:-2, 1:-1]) / (2 * h) + (
            self.b_y[1:-1, 2:] - self.b_y[1:-1, :-2]
        ) / (2 * h)

    def boundary_normal(self) -> np.ndarray:
        """Normal components on the four edges, concatenated."""
        return np.concatenate([self.b_x[0, :], self.b_x[-1, :], self.b_y[:, 0], self.b_y[:, -1]])


def build_drift(grid: GridDomain, stream: StreamFunction | str, **params) -> DriftField:
    if isinstance(stream, str):
        stream = make_stream(stream, **params)
    t = np.arange(grid.n_per_dim + 2) * grid.h
    x, y = np.meshgrid(t, t, indexing="ij")
    edge = np.concatenate([stream.value(x[0], y[0]), stream.value(x[-1], y[-1]),
                           stream.value(x[:, 0], y[:, 0]), stream.value(x[:, -1], y[:, -1])])
    if np.max(np.abs(edge)) > BOUNDARY_TOL:
        raise ValueError(
            f"stream function {stream.name} does not vanish on the boundary "
            f"(max |psi| = {np.max(np.abs(edge)):.3e}); b would not be tangent"
        )
    b_x = np.array(stream.d_y(x, y), dtype=float)
    b_y = -np.array(stream.d_x(x, y), dtype=float)
    # psi == 0 along each edge, so the tangential derivative (= normal b) is exactly zero there
    b_x[0, :] = b_x[-1, :] = 0.0
    b_y[:, 0] = b_y[:, -1] = 0.0
    return DriftField(grid, stream, b_x, b_y)


def directional_derivative_matrix(b: DriftField) -> sp.csr_matrix:
    """Sparse D_b: phi -> b_x d_x phi + b_y d_y phi by centered differences, zero Dirichlet."""
    n, h = b.grid.n_per_dim, b.grid.h
    bx, by = (c.ravel() for c in b.interior)
    d1 = sp.diags([-np.ones(n - 1), np.ones(n - 1)], [-1, 1]) / (2 * h)
    eye = sp.identity(n)
    dx = sp.kron(d1, eye)
    dy = sp.kron(eye, d1)
    return (sp.diags(bx) @ dx + sp.diags(by) @ dy).tocsr()


# -- the group -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DriftGroup:
    grid: GridDomain
    generator: np.ndarray = field(repr=False)  # B_z, real skew, flat (j, k) order
    frequencies: np.ndarray = field(repr=False)  # mu, with i B_z = V diag(mu) V^H
    modes: np.ndarray | None = field(repr=False)  # V; None for the zero generator
    op_norm: float = 0.0

    @property
    def is_trivial(self) -> bool:
        return self.modes is None

    @property
    def _sqrt_lam(self) -> np.ndarray:
        return np.sqrt(self.grid.eigenvalues).ravel()

    def scaled(self, phi: np.ndarray) -> np.ndarray:
        a = self.grid.coefficients(phi)
        return a.reshape(a.shape[:-2] + (self.grid.dim,)) / self._sqrt_lam

    def unscaled(self, z: np.ndarray) -> np.ndarray:
        a = np.asarray(z) * self._sqrt_lam
        return self.grid.synthesize(a.reshape(a.shape[:-1] + self.grid.shape))

    def to_modal(self, phi: np.ndarray) -> np.ndarray:
        z = self.scaled(phi)
        return z if self.modes is None else z @ self.modes.conj()

    def from_modal(self, w: np.ndarray) -> np.ndarray:
        z = w if self.modes is None else (w @ self.modes.T).real
        return self.unscaled(z)

    def phase(self, s) -> np.ndarray | float:
        """Diagonal of e^{sB} in modal coordinates; s may carry batch axes."""
        if self.modes is None:
            return 1.0
        s = np.asarray(s, dtype=float)
        return np.exp(-1j * s[..., None] * self.frequencies)

    def apply(self, s, phi: np.ndarray) -> np.ndarray:
        """e^{sB} phi.  ``s`` is a scalar or broadcasts against phi's batch axes."""
        if self.modes is None:
            return np.array(phi, dtype=float, copy=True)
        return self.from_modal(self.phase(s) * self.to_modal(phi))

    def generator_apply(self, phi: np.ndarray) -> np.ndarray:
        return self.unscaled(self.scaled(phi) @ self.generator.T)


def build_group(grid: GridDomain, b: DriftField) -> DriftGroup:
    if b.grid.n_per_dim != grid.n_per_dim:
        raise ValueError("drift field and grid sizes differ")
    n, N = grid.n_per_dim, grid.dim
    d = directional_derivative_matrix(b).toarray()
    k = 0.5 * (d - d.T)
    # K_hat = Q^T K Q with Q the orthonormal 2-D sine transform (symmetric)
    k = dstn(k.reshape(n, n, N), type=1, norm="ortho", axes=(0, 1)).reshape(N, N)
    k = dstn(k.T.reshape(n, n, N), type=1, norm="ortho", axes=(0, 1)).reshape(N, N).T
    inv_sqrt = 1.0 / np.sqrt(grid.eigenvalues).ravel()
    gen = inv_sqrt[:, None] * k * inv_sqrt[None, :]
    gen = 0.5 * (gen - gen.T)
    if not np.any(gen):
        return DriftGroup(grid, gen, np.zeros(N), None, 0.0)
    mu, v = np.linalg.eigh(1j * gen)
    op_norm = float(np.linalg.norm(np.sqrt(grid.eigenvalues).ravel()[:, None] * gen, 2))
    return DriftGroup(grid, gen, mu, v, op_norm)


def group_apply(group: DriftGroup, s, phi: np.ndarray) -> np.ndarray:
    return group.apply(s, phi)


# -- folded normal -------------------------------------------------------------


def omega(delta: float) -> float:
    """E[e^{delta |Z|} - 1] for standard normal Z, i.e. 2 e^{delta^2/2} Phi(delta) - 1."""
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    # written without the 2*Phi - 1 cancellation
    return math.expm1(0.5 * delta * delta) + math.exp(0.5 * delta * delta) * math.erf(delta / math.sqrt(2.0))


def omega_defect(delta: float) -> float:
    """(omega(2 delta) - 2 omega(delta)) / delta^2.

    For delta <= 1 both parts of omega are summed as power series with the
    cancelling linear terms removed analytically; the limit at 0+ is 1.
    """
    if delta <= 0:
        raise ValueError("omega_defect needs delta > 0")
    if delta > 1.0:
        return (omega(2 * delta) - 2 * omega(delta)) / delta**2
    d2 = delta * delta
    # expm1(2 d^2) - 2 expm1(d^2/2) = sum_{m>=1} (2^m - 2^{1-m}) d^{2m} / m!
    total, term_pow, fact = 0.0, 1.0, 1.0
    for m in range(1, 60):
        fact *= m
        t = (2.0**m - 2.0 ** (1 - m)) * term_pow / fact
        total += t
        term_pow *= d2
        if abs(t) < 1e-18 * abs(total):
            break
    # e^{d^2/2} erf(d/sqrt2) = sqrt(2/pi) sum_{n>=0} d^{2n+1} / (2n+1)!!
    series, dfact, power = 0.0, 1.0, delta
    for n in range(1, 200):
        dfact *= 2 * n + 1
        t = (2.0 ** (2 * n + 1) - 2.0) * power / dfact
        series += t
        power *= d2
        if abs(t) < 1e-18 * abs(series):
            break
    return total + math.sqrt(2.0 / math.pi) * series


# -- Brownian paths ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BrownianPath:
    """W on a uniform grid, W(t0) = 0.  ``values`` is (M+1,) or (S, M+1) for a batch."""

    t0: float
    t1: float
    step: float
    values: np.ndarray = field(repr=False)
    seed: int | tuple = 0

    @property
    def n_steps(self) -> int:
        return self.values.shape[-1] - 1

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.step * np.arange(self.n_steps + 1)

    @property
    def n_samples(self) -> int | None:
        return self.values.shape[0] if self.values.ndim == 2 else None


def _n_steps(t0: float, t1: float, step: float) -> int:
    if step <= 0:
        raise ValueError("step must be positive")
    if not t1 > t0:
        raise ValueError("need t0 < t1")
    return int(math.ceil((t1 - t0) / step - 1e-9))


def _increments(seed, m: int, step: float) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(m) * math.sqrt(step)


def sample_brownian(t0: float, t1: float, step: float, seed) -> BrownianPath:
    m = _n_steps(t0, t1, step)
    w = np.concatenate([[0.0], np.cumsum(_increments(seed, m, step))])
    return BrownianPath(t0, t0 + m * step, step, w, seed)


def mc_seeds(base_seed: int, n: int) -> list[tuple[int, int]]:
    """Per-sample seeds; sample k of base seed s always draws from the stream (s, k)."""
    return [(int(base_seed), k) for k in range(n)]


def sample_brownian_batch(t0: float, t1: float, step: float, seeds: Sequence) -> BrownianPath:
    m = _n_steps(t0, t1, step)
    inc = np.stack([_increments(s, m, step) for s in seeds])
    w = np.concatenate([np.zeros((len(seeds), 1)), np.cumsum(inc, axis=1)], axis=1)
    return BrownianPath(t0, t0 + m * step, step, w, tuple(seeds))


def gamma_l2_defect_mc(group: DriftGroup, zeta: np.ndarray, duration: float,
                       n_samples: int = 2000, seed: int = 0) -> float:
    """Monte Carlo E ||e^{(W(s)-W(t)) B} zeta - zeta||^2_{L2} with W(s)-W(t) ~ N(0, s-t).

    The same standard normals are reused for every duration under one seed, so
    a sweep over (s - t) uses common random numbers.
    """
    if n_samples < 1000:
        raise ValueError("n_samples must be at least 1000")
    if group.is_trivial:
        return 0.0
    incr = math.sqrt(duration) * np.random.default_rng(seed).standard_normal(n_samples)
    out = np.empty(n_samples)
    w0 = group.to_modal(zeta)
    for lo in range(0, n_samples, 500):
        sl = slice(lo, min(lo + 500, n_samples))
        moved = group.from_modal(group.phase(incr[sl]) * w0)
        out[sl] = group.grid.norm_sq(moved - zeta, "L2")
    return float(out.mean())
