"""Sine eigenbasis shared by the hinged fourth-order operator and the
Dirichlet Laplacian on (0, 1), plus modal states and discrete Sobolev norms.

Mode ``i`` (1-based) has heat eigenvalue ``lam_i = (i*pi)**2``, fourth-order
eigenvalue ``mu_i = lam_i**2`` and eigenfunction ``sqrt(2) sin(i*pi*x)``.
Arrays of modal coefficients are always indexed 0-based along their last axis.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.integrate import simpson

SQRT2 = np.sqrt(2.0)


class InvalidModeError(ValueError):
    pass


def eigenpair(i):
    """Return ``(lam_i, mu_i, phi_i)`` for mode ``i >= 1``.

    ``phi_i`` is a vectorised callable ``x -> sqrt(2) sin(i pi x)``.
    """
    if int(i) != i or i < 1:
        raise InvalidModeError(f"mode index must be a positive integer, got {i!r}")
    i = int(i)
    lam = (i * np.pi) ** 2
    mu = lam**2

    def phi(x):
        return SQRT2 * np.sin(i * np.pi * np.asarray(x, dtype=float))

    return lam, mu, phi


@dataclass(frozen=True)
class ModalState:
    """Paired coefficient arrays ``(y, z)`` with shape ``(..., n_modes)``."""

    y: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        z = np.asarray(self.z, dtype=float)
        if y.shape != z.shape:
            raise ValueError(f"y and z shapes differ: {y.shape} vs {z.shape}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", z)

    @property
    def n_modes(self):
        return self.y.shape[-1]

    @classmethod
    def zeros(cls, n_modes, batch=()):
        shape = tuple(np.atleast_1d(batch).tolist()) + (n_modes,)
        return cls(np.zeros(shape), np.zeros(shape))

    @classmethod
    def from_stacked(cls, x):
        x = np.asarray(x, dtype=float)
        n = x.shape[-1] // 2
        return cls(x[..., :n].copy(), x[..., n:].copy())

    def stacked(self):
        """Concatenate to a single ``(..., 2 n_modes)`` array, y-modes first."""
        return np.concatenate([self.y, self.z], axis=-1)

    def __add__(self, other):
        return ModalState(self.y + other.y, self.z + other.z)

    def __sub__(self, other):
        return ModalState(self.y - other.y, self.z - other.z)

    def scale(self, c):
        return ModalState(c * self.y, c * self.z)


@dataclass(frozen=True)
class FieldOnGrid:
    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        if grid.ndim != 1 or grid.size < 2:
            raise ValueError("grid needs at least two points")
        if grid[0] != 0.0 or grid[-1] != 1.0:
            raise ValueError("grid must include both endpoints 0 and 1")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))

    def l2_norm(self):
        return float(np.sqrt(simpson(self.values**2, x=self.grid, axis=-1)))


class SpectralBasis:
    """First ``n_modes`` sine modes with their eigenvalues.

    Immutable after construction; grid matrices are cached lazily.
    """

    def __init__(self, n_modes):
        if int(n_modes) != n_modes or n_modes < 1:
            raise ValueError(f"n_modes must be a positive integer, got {n_modes!r}")
        self.n_modes = int(n_modes)
        self.index = np.arange(1, self.n_modes + 1)
        lam = (self.index * np.pi) ** 2
        lam.setflags(write=False)
        self.lam = lam
        mu = lam**2
        mu.setflags(write=False)
        self.mu = mu

    def __repr__(self):
        return f"SpectralBasis(n_modes={self.n_modes})"

    def phi(self, x):
        """Eigenfunction values, shape ``(n_modes, len(x))``."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return SQRT2 * np.sin(np.pi * np.outer(self.index, x))

    def dphi(self, x, order=1):
        """``order``-th derivative of every eigenfunction at ``x``."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        k = np.pi * self.index[:, None]
        arg = k * x[None, :]
        # d^n/dx^n sin(kx) = k^n sin(kx + n pi/2)
        return SQRT2 * k**order * np.sin(arg + order * np.pi / 2)

    def synthesize(self, coeffs, x, order=0):
        """Evaluate ``sum_i c_i phi_i^{(order)}(x)`` for batched coefficients."""
        mat = self.phi(x) if order == 0 else self.dphi(x, order)
        return np.asarray(coeffs, dtype=float) @ mat

    def analyze(self, field):
        """Project a :class:`FieldOnGrid` onto the modes by Simpson quadrature."""
        vals = field.values[..., None, :] * self.phi(field.grid)
        return simpson(vals, x=field.grid, axis=-1)

    def band(self, r):
        """Boolean mask of modes with ``mu_i <= r`` (relative slack 1e-12 so
        that ``r = mu_k`` computed another way still includes mode k)."""
        return self.mu <= r * (1 + 1e-12)

    def band_size(self, r):
        return int(np.count_nonzero(self.band(r)))

    @cached_property
    def _mass_cache(self):
        return {}

    def mass_matrix(self, interval):
        """Exact Gram matrix ``int_a^b phi_i phi_j dx`` over ``interval=(a, b)``."""
        a, b = map(float, interval)
        key = (a, b)
        if key not in self._mass_cache:
            self._mass_cache[key] = restricted_mass(self.n_modes, a, b)
        return self._mass_cache[key]


def restricted_mass(n_modes, a, b):
    """Closed form of ``int_a^b 2 sin(i pi x) sin(j pi x) dx`` for i, j <= n_modes."""
    if not 0.0 <= a < b <= 1.0:
        raise ValueError(f"invalid interval ({a}, {b})")
    idx = np.arange(1, n_modes + 1)
    i = idx[:, None]
    j = idx[None, :]

    def cos_integral(k):
        # int_a^b cos(k pi x) dx, with the k = 0 limit b - a
        k = np.asarray(k, dtype=float)
        out = np.empty_like(k)
        zero = k == 0
        kk = k[~zero] * np.pi
        out[~zero] = (np.sin(kk * b) - np.sin(kk * a)) / kk
        out[zero] = b - a
        return out

    m = cos_integral(i - j) - cos_integral(i + j)
    m = 0.5 * (m + m.T)
    m.setflags(write=False)
    return m


def project_band(state, basis, r):
    """Zero every mode with ``mu_i > r`` in both components (orthogonal projection)."""
    if r < 0:
        raise ValueError("frequency cutoff must be nonnegative")
    mask = basis.band(r)
    return ModalState(state.y * mask, state.z * mask)


_ORDERS = {"y": (0, 1, 2, 4), "z": (0, 1, 2)}


def sobolev_norm(state, basis, order, component="y"):
    """Discrete H^s norm ``(sum (1 + lam_i)^s c_i^2)^(1/2)`` of one component.

    Batched states return one norm per leading index.
    """
    if component not in _ORDERS:
        raise ValueError(f"component must be 'y' or 'z', got {component!r}")
    if order not in _ORDERS[component]:
        raise ValueError(f"order {order} not supported for component {component}")
    c = state.y if component == "y" else state.z
    w = (1.0 + basis.lam) ** order
    return np.sqrt(np.sum(w * c**2, axis=-1))


def sobolev_weights(basis, order):
    """Multipliers ``(1 + lam_i)^order`` so that ``||c||_s^2 = sum w_i c_i^2``."""
    return (1.0 + basis.lam) ** order


def energy(state):
    """``||y||^2 + ||z||^2`` in L^2, per batch entry."""
    return np.sum(state.y**2, axis=-1) + np.sum(state.z**2, axis=-1)


def uniform_grid(n_points):
    return np.linspace(0.0, 1.0, int(n_points))
