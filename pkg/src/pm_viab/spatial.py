"""Discrete Dirichlet Laplacian on the unit square and the L2 / H^-1 / H^1_0 metrics.

Fields are plain float arrays whose last axis has length ``n**2`` (interior
nodes, x-index major).  Leading axes are batch axes, so every routine here
acts sample-wise on Monte Carlo ensembles without Python loops.

The analytic eigenpairs of the 5-point operator are

    lambda_jk = (4/h^2) (sin^2(j pi h/2) + sin^2(k pi h/2)),
    e_jk(x_i, y_l) = 2 sin(j pi x_i) sin(k pi y_l),

and ``e_jk`` is orthonormal for the h^2-weighted L2 product.  The coefficient
transform is the orthonormal DST-I in both directions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.fft import dstn

METRICS = ("L2", "Hminus1", "H10")


@dataclass(frozen=True, eq=False)
class GridDomain:
    """Uniform interior grid of (0,1)^2 with ``n_per_dim`` nodes per direction."""

    n_per_dim: int
    h: float = field(init=False)
    eigenvalues: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = int(self.n_per_dim)
        if n < 2:
            raise ValueError(f"n_per_dim must be >= 2, got {self.n_per_dim}")
        h = 1.0 / (n + 1)
        s = np.sin(np.arange(1, n + 1) * np.pi * h / 2.0) ** 2
        lam = (4.0 / h**2) * (s[:, None] + s[None, :])
        lam.setflags(write=False)
        object.__setattr__(self, "n_per_dim", n)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "eigenvalues", lam)

    @property
    def dim(self) -> int:
        return self.n_per_dim**2

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_per_dim, self.n_per_dim)

    @cached_property
    def nodes(self) -> tuple[np.ndarray, np.ndarray]:
        """Interior coordinates as two (n, n) arrays indexed [i_x, i_y]."""
        t = np.arange(1, self.n_per_dim + 1) * self.h
        return np.meshgrid(t, t, indexing="ij")

    @cached_property
    def mode_order(self) -> np.ndarray:
        """Flat indices of (j, k) sorted by increasing eigenvalue (ties by (j, k))."""
        flat = self.eigenvalues.ravel()
        return np.lexsort((np.arange(flat.size), flat))

    @cached_property
    def sorted_eigenvalues(self) -> np.ndarray:
        return self.eigenvalues.ravel()[self.mode_order]

    @property
    def lambda_min(self) -> float:
        return float(self.eigenvalues[0, 0])

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[-1, -1])

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        """Assembled 5-point matrix of A = -Delta_h (SPD)."""
        n = self.n_per_dim
        t = sp.diags([-np.ones(n - 1), 2.0 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1])
        eye = sp.identity(n)
        return (sp.kron(t, eye) + sp.kron(eye, t)).tocsr() / self.h**2

    # -- coefficient transforms ------------------------------------------------

    def _grid(self, phi: np.ndarray) -> np.ndarray:
        phi = np.asarray(phi, dtype=float)
        if phi.shape[-1] != self.dim:
            raise ValueError(f"field has length {phi.shape[-1]}, grid expects {self.dim}")
        return phi.reshape(phi.shape[:-1] + self.shape)

    def coefficients(self, phi: np.ndarray) -> np.ndarray:
        """L2 coefficients <phi, e_jk> as (..., n, n)."""
        return self.h * dstn(self._grid(phi), type=1, norm="ortho", axes=(-2, -1))

    def synthesize(self, coef: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`coefficients`; returns flat fields."""
        coef = np.asarray(coef, dtype=float)
        out = dstn(coef, type=1, norm="ortho", axes=(-2, -1)) / self.h
        return out.reshape(coef.shape[:-2] + (self.dim,))

    def eigenvector(self, j: int, k: int) -> np.ndarray:
        """L2-normalized eigenfield e_jk (1-based mode numbers)."""
        n = self.n_per_dim
        if not (1 <= j <= n and 1 <= k <= n):
            raise ValueError(f"mode ({j}, {k}) outside 1..{n}")
        x, y = self.nodes
        return (2.0 * np.sin(j * np.pi * x) * np.sin(k * np.pi * y)).ravel()

    def spectral_apply(self, phi: np.ndarray, power: float) -> np.ndarray:
        """A**power applied through the sine eigenbasis."""
        return self.synthesize(self.eigenvalues**power * self.coefficients(phi))

    # -- operators -------------------------------------------------------------

    def laplacian_apply(self, phi: np.ndarray) -> np.ndarray:
        """A phi with the 5-point stencil (zero Dirichlet values outside)."""
        u = self._grid(phi)
        out = 4.0 * u
        out[..., 1:, :] -= u[..., :-1, :]
        out[..., :-1, :] -= u[..., 1:, :]
        out[..., :, 1:] -= u[..., :, :-1]
        out[..., :, :-1] -= u[..., :, 1:]
        return (out / self.h**2).reshape(u.shape[:-2] + (self.dim,))

    def laplacian_solve(self, phi: np.ndarray) -> np.ndarray:
        """A^{-1} phi via the eigenbasis."""
        return self.synthesize(self.coefficients(phi) / self.eigenvalues)

    # -- metrics ---------------------------------------------------------------

    def inner(self, phi: np.ndarray, psi: np.ndarray, metric: str = "L2") -> np.ndarray:
        """h^2-weighted inner product in the requested metric (batched over leading axes)."""
        phi = np.asarray(phi, dtype=float)
        psi = np.asarray(psi, dtype=float)
        if metric == "L2":
            left = phi
        elif metric == "Hminus1":
            left = self.laplacian_solve(phi)
        elif metric == "H10":
            left = self.laplacian_apply(phi)
        else:
            raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
        if psi.shape[-1] != self.dim:
            raise ValueError(f"field has length {psi.shape[-1]}, grid expects {self.dim}")
        return self.h**2 * np.sum(left * psi, axis=-1)

    def norm_sq(self, phi: np.ndarray, metric: str = "Hminus1") -> np.ndarray:
        """Squared norm, computed from the sine coefficients (exact Parseval)."""
        a2 = self.coefficients(phi) ** 2
        if metric == "L2":
            w = 1.0
        elif metric == "Hminus1":
            w = 1.0 / self.eigenvalues
        elif metric == "H10":
            w = self.eigenvalues
        else:
            raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
        return np.sum(a2 * w, axis=(-2, -1))

    def norm(self, phi: np.ndarray, metric: str = "Hminus1") -> np.ndarray:
        return np.sqrt(self.norm_sq(phi, metric))

    def hminus1_basis_coefficients(self, phi: np.ndarray) -> np.ndarray:
        """<phi, sqrt(lambda_k) e_k>_{H^-1} in increasing-eigenvalue order, shape (..., n^2)."""
        c = self.coefficients(phi) / np.sqrt(self.eigenvalues)
        return c.reshape(c.shape[:-2] + (self.dim,))[..., self.mode_order]

    def transfer(self, phi: np.ndarray, target: GridDomain) -> np.ndarray:
        """Spectral transfer: keep the common (j, k) L2 coefficients, pad or truncate the rest."""
        if target is self or target.n_per_dim == self.n_per_dim:
            return np.array(phi, dtype=float, copy=True)
        a = self.coefficients(phi)
        m = min(self.n_per_dim, target.n_per_dim)
        out = np.zeros(a.shape[:-2] + target.shape)
        out[..., :m, :m] = a[..., :m, :m]
        return target.synthesize(out)

    def transfer_norm(self, target: GridDomain) -> float:
        """Operator norm of :meth:`transfer` in H^-1 -> H^-1."""
        if target.n_per_dim == self.n_per_dim:
            return 1.0
        m = min(self.n_per_dim, target.n_per_dim)
        ratio = self.eigenvalues[:m, :m] / target.eigenvalues[:m, :m]
        return float(np.sqrt(ratio.max()))


def build_grid(n_per_dim: int) -> GridDomain:
    return GridDomain(n_per_dim)
