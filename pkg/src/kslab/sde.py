"""Seeded Brownian paths and the semi-implicit Euler-Maruyama Galerkin scheme
for the coupled system

    dy + (y_xxxx + F + a f_R(y, y_x)) dt = (chi_D0 h + a1 y + a2 z) dt + (b1 y + b2 z) dW
    dz - z_xx dt = (a3 y + a4 z) dt + b3 z dW

in the hinged sine basis.  States are stacked ``x = [y, z]`` arrays of shape
``(paths, 2 n_modes)``.  The diagonal stiff part (``mu_i`` on y, ``lam_i`` on
z) is implicit; couplings, control, sources, the nonlinearity and the noise
are explicit, so each step only uses information available at its start.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import basis as _basis
from .basis import ModalState
from .weights import log_rho_hat

log = logging.getLogger(__name__)


class PropagationError(RuntimeError):
    def __init__(self, step, msg="non-finite state"):
        super().__init__(f"{msg} at step {step}")
        self.step = step


def _as_fn(v):
    if callable(v):
        return v
    v = float(v)
    return lambda t: v


@dataclass(frozen=True)
class SystemCoefficients:
    """Time-dependent scalar coefficients (constants or callables of ``t``).

    ``a`` switches the nonlinearity on (1) or off (0); ``a1..a4`` are the
    zero-order couplings with the default ``a3 = 1`` of the base model.
    """

    b1: object = 0.0
    b2: object = 0.0
    b3: object = 0.0
    a: int = 0
    a1: object = 0.0
    a2: object = 0.0
    a3: object = 1.0
    a4: object = 0.0

    def __post_init__(self):
        if self.a not in (0, 1):
            raise ValueError(f"nonlinearity switch a must be 0 or 1, got {self.a}")

    def noise(self, t):
        return _as_fn(self.b1)(t), _as_fn(self.b2)(t), _as_fn(self.b3)(t)

    def drift(self, t):
        return _as_fn(self.a1)(t), _as_fn(self.a2)(t), _as_fn(self.a3)(t), _as_fn(self.a4)(t)

    def sup_norms(self, T=1.0, n=1001):
        ts = np.linspace(0.0, T, n)
        out = []
        for b in (self.b1, self.b2, self.b3):
            f = _as_fn(b)
            out.append(max(abs(f(t)) for t in ts))
        if not all(np.isfinite(out)):
            raise ValueError("noise coefficients must be bounded")
        return tuple(out)

    def sigma(self, T=1.0):
        """``1 + 4 sum ||b_i||_inf^2``."""
        return 1.0 + 4.0 * sum(b**2 for b in self.sup_norms(T))

    @property
    def deterministic_constant(self):
        return not any(callable(v) for v in (self.b1, self.b2, self.b3, self.a1, self.a2, self.a3, self.a4))

    def to_dict(self):
        out = {}
        for k in ("b1", "b2", "b3", "a", "a1", "a2", "a3", "a4"):
            v = getattr(self, k)
            out[k] = v if not callable(v) else repr(v)
        return out


# ---------------------------------------------------------------------------
# Brownian paths


@dataclass(frozen=True)
class BrownianPath:
    """One path: time grid and its Gaussian increments ``N(0, dt_n)``."""

    times: np.ndarray
    increments: np.ndarray
    seed: int

    @property
    def n_steps(self):
        return self.increments.size

    @property
    def dt(self):
        steps = np.diff(self.times)
        if not np.allclose(steps, steps[0], rtol=1e-12, atol=0.0):
            raise ValueError("path grid is not uniform")
        return float(steps[0])

    def W(self):
        return np.concatenate([[0.0], np.cumsum(self.increments)])


@dataclass(frozen=True)
class BrownianBatch:
    """Increments for several independent paths on one time grid.

    Path ``j`` is drawn from ``SeedSequence(seed).spawn(...)[j]`` so any subset
    of paths can be regenerated independently of batch size or chunking.
    """

    times: np.ndarray
    increments: np.ndarray  # (paths, n_steps)
    seed: int
    path_ids: np.ndarray = field(default=None)

    @property
    def n_paths(self):
        return self.increments.shape[0]

    @property
    def n_steps(self):
        return self.increments.shape[1]

    @property
    def dts(self):
        return np.diff(self.times)

    def path(self, j):
        return BrownianPath(self.times, self.increments[j], self.seed)

    def subset(self, idx):
        idx = np.asarray(idx)
        ids = None if self.path_ids is None else self.path_ids[idx]
        return BrownianBatch(self.times, self.increments[idx], self.seed, ids)

    def window(self, k0, k1):
        """Restrict to steps ``k0 .. k1-1`` (times ``k0 .. k1``)."""
        return BrownianBatch(self.times[k0 : k1 + 1], self.increments[:, k0:k1], self.seed, self.path_ids)

    def coarsen(self, factor):
        """Sum increments in groups of ``factor`` (same Brownian motion, coarser grid)."""
        factor = int(factor)
        if self.n_steps % factor:
            raise ValueError("factor must divide the number of steps")
        inc = self.increments.reshape(self.n_paths, -1, factor).sum(axis=2)
        return BrownianBatch(self.times[::factor], inc, self.seed, self.path_ids)


def uniform_times(T, n_steps):
    return np.linspace(0.0, float(T), int(n_steps) + 1)


def brownian_batch(times, n_paths, seed, first_path=0):
    """Draw increments for paths ``first_path .. first_path + n_paths - 1``."""
    times = np.asarray(times, dtype=float)
    dts = np.diff(times)
    if np.any(dts <= 0):
        raise ValueError("time grid must be strictly increasing")
    children = np.random.SeedSequence(int(seed)).spawn(first_path + int(n_paths))[first_path:]
    sd = np.sqrt(dts)
    inc = np.empty((int(n_paths), dts.size))
    for j, ss in enumerate(children):
        inc[j] = np.random.default_rng(ss).standard_normal(dts.size) * sd
    ids = np.arange(first_path, first_path + int(n_paths))
    return BrownianBatch(times, inc, int(seed), ids)


def brownian_path(T, n_steps, seed):
    b = brownian_batch(uniform_times(T, n_steps), 1, seed)
    return b.path(0)


# ---------------------------------------------------------------------------
# nonlinearity y * y_x, pseudo-spectrally


class Advection:
    """Modal projection of ``y y_x`` for sine-series ``y``.

    Products are formed on a uniform grid of ``3 n_modes + 1`` intervals; the
    integrand against ``phi_i`` is a cosine polynomial of degree below
    ``3 n_modes`` so trapezoidal quadrature on that grid is exact (the 3/2
    padding rule, i.e. 2/3 dealiasing).
    """

    def __init__(self, basis, n_intervals=None):
        n = basis.n_modes
        self.n_intervals = int(n_intervals or 3 * n + 1)
        if self.n_intervals < (3 * n) // 2 + 1:
            raise ValueError("grid too coarse for exact dealiased products")
        x = np.linspace(0.0, 1.0, self.n_intervals + 1)
        w = np.full(x.size, 1.0 / self.n_intervals)
        w[[0, -1]] *= 0.5
        self.x = x
        self._S = basis.phi(x)  # (n, N+1)
        self._D = basis.dphi(x, 1)
        self._proj = (self._S * w).T  # (N+1, n)

    def __call__(self, y):
        u = y @ self._S
        ux = y @ self._D
        return (u * ux) @ self._proj


# ---------------------------------------------------------------------------
# running X_t norm


class XtAccumulator:
    """Running ``||(y, z)||_{X_t}`` for a batch of paths.

    Tracks the two running sups of ``||y/rho_hat||_{H^2}^2`` and
    ``||z/rho_hat||_{H^1}^2`` and trapezoidal integrals of
    ``||y/rho_hat||_{H^4}^2`` and ``||z/rho_hat||_{H^2}^2``.  A nonzero state
    where ``rho_hat`` underflows sets ``blowup``.
    """

    def __init__(self, basis, weights, n_paths):
        self.p = weights
        self.wy2 = _basis.sobolev_weights(basis, 2)
        self.wz1 = _basis.sobolev_weights(basis, 1)
        self.wy4 = _basis.sobolev_weights(basis, 4)
        self.wz2 = _basis.sobolev_weights(basis, 2)
        self.n = basis.n_modes
        self.sup_y = np.zeros(n_paths)
        self.sup_z = np.zeros(n_paths)
        self.int_y = np.zeros(n_paths)
        self.int_z = np.zeros(n_paths)
        self.blowup = np.zeros(n_paths, dtype=bool)
        self._last = None  # (t, integrand_y, integrand_z)

    def _weighted(self, x, t):
        y, z = x[:, : self.n], x[:, self.n :]
        lw = -2.0 * log_rho_hat(self.p, min(t, self.p.T))
        ny2 = (y**2) @ self.wy2
        nz1 = (z**2) @ self.wz1
        ny4 = (y**2) @ self.wy4
        nz2 = (z**2) @ self.wz2
        with np.errstate(over="ignore", invalid="ignore"):
            scale = math.exp(lw) if lw < 700 else math.inf
            out = [v * scale if scale != math.inf else np.where(v > 0, np.inf, 0.0) for v in (ny2, nz1, ny4, nz2)]
        return out

    def update(self, x, t):
        ny2, nz1, ny4, nz2 = self._weighted(x, t)
        self.blowup |= ~np.isfinite(ny2) | ~np.isfinite(nz1) | ~np.isfinite(ny4) | ~np.isfinite(nz2)
        self.sup_y = np.maximum(self.sup_y, ny2)
        self.sup_z = np.maximum(self.sup_z, nz1)
        if self._last is not None:
            t0, iy0, iz0 = self._last
            h = t - t0
            self.int_y = self.int_y + 0.5 * h * (iy0 + ny4)
            self.int_z = self.int_z + 0.5 * h * (iz0 + nz2)
        self._last = (t, ny4, nz2)

    def value(self):
        return np.sqrt(self.sup_y + self.sup_z + self.int_y + self.int_z)

    def components(self):
        return {
            "sup_y_H2": self.sup_y.copy(),
            "sup_z_H1": self.sup_z.copy(),
            "int_y_H4": self.int_y.copy(),
            "int_z_H2": self.int_z.copy(),
        }


# ---------------------------------------------------------------------------
# one step


def _split(x, n):
    return x[..., :n], x[..., n:]


def _drift_and_noise(x, n, coeffs, t):
    y, z = _split(x, n)
    a1, a2, a3, a4 = coeffs.drift(t)
    b1, b2, b3 = coeffs.noise(t)
    drift = np.concatenate([a1 * y + a2 * z, a3 * y + a4 * z], axis=-1)
    noise = np.concatenate([b1 * y + b2 * z, b3 * z], axis=-1)
    return drift, noise


def stiff_diagonal(basis):
    return np.concatenate([basis.mu, basis.lam])


def step_stacked(x, basis, coeffs, t, dt, dW, injection=None, forcing=None):
    """Advance stacked states one step.

    ``injection`` is the modal projection of ``chi_D0 h`` (added to the y
    drift) and ``forcing`` any extra y-drift (``-F`` or ``-f_R``), both with
    shape ``(paths, n)`` or broadcastable.
    """
    n = basis.n_modes
    drift, noise = _drift_and_noise(x, n, coeffs, t)
    if injection is not None:
        drift[..., :n] += injection
    if forcing is not None:
        drift[..., :n] += forcing
    dW = np.asarray(dW, dtype=float)
    if dW.ndim == 1 and x.ndim == 2:
        dW = dW[:, None]
    rhs = x + dt * drift + noise * dW
    return rhs / (1.0 + dt * stiff_diagonal(basis))


def step_linear(state, basis, coeffs, control, dW, dt, t=0.0):
    """One semi-implicit step of the linear system.

    ``control`` is the modal vector of ``chi_D0 h`` (or ``None``).
    """
    x = state.stacked()
    out = step_stacked(x, basis, coeffs, t, dt, dW, injection=control)
    if not np.all(np.isfinite(out)):
        raise PropagationError(0)
    return ModalState.from_stacked(out)


def step_semilinear(state, basis, coeffs, control, dW, dt, R, running_xt, t=0.0, advection=None):
    """As :func:`step_linear` plus the drift ``-phi_R(X_t) y y_x``.

    ``running_xt`` is the X_t norm of the trajectory up to the current time
    (scalar or one value per path).
    """
    from .nonlinear import Cutoff

    adv = advection or Advection(basis)
    cut = Cutoff(R)(np.asarray(running_xt, dtype=float))
    x = state.stacked()
    y = x[..., : basis.n_modes]
    f = adv(y)
    cut = np.asarray(cut)
    forcing = -(cut[..., None] if cut.ndim else cut) * f
    out = step_stacked(x, basis, coeffs, t, dt, dW, injection=control, forcing=forcing)
    if not np.all(np.isfinite(out)):
        raise PropagationError(0)
    return ModalState.from_stacked(out)


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class TrajectoryRecord:
    """Simulated ensemble on a time grid.

    ``states`` has shape ``(paths, len(times), 2 n_modes)``; ``cost`` holds
    per-step increments of ``int_{D0} |h|^2 dt`` with shape ``(paths, steps)``;
    ``xt`` the running X_t norm at every grid time when tracked.
    """

    times: np.ndarray
    states: np.ndarray
    cost: np.ndarray
    n_modes: int
    xt: np.ndarray = None
    xt_blowup: np.ndarray = None
    forcing: np.ndarray = None  # (paths, steps, n) y-source F actually applied, if recorded

    @property
    def y(self):
        return self.states[..., : self.n_modes]

    @property
    def z(self):
        return self.states[..., self.n_modes :]

    def state_at(self, k):
        return ModalState.from_stacked(self.states[:, k])

    def energy(self):
        """``||y||^2 + ||z||^2`` per path and time."""
        return np.sum(self.states**2, axis=-1)

    def mean_energy(self):
        return self.energy().mean(axis=0)


def simulate(
    basis,
    coeffs,
    x0,
    paths,
    policy=None,
    source=None,
    nonlinear=None,
    record=True,
    t0_index=0,
):
    """Run the scheme on every path of ``paths`` (a :class:`BrownianBatch`).

    ``x0``: stacked initial states ``(paths, 2n)`` (or ``(2n,)`` broadcast).
    ``policy``: object with ``apply(k, t, x) -> (injection, cost_rate)`` where
    ``cost_rate`` is ``int_{D0} |h|^2`` at step ``k``; ``None`` means h = 0.
    ``source``: y-equation source ``F`` as an array ``(paths or 1, steps, n)``
    or a callable ``(k, t) -> (paths or 1, n)``; enters the drift as ``-F``.
    ``nonlinear``: dict with ``R``, ``weights`` (:class:`SourceWeightParams`)
    and optional ``advection``; adds ``-phi_R(X_t) y y_x`` and tracks X_t.
    """
    n = basis.n_modes
    P = paths.n_paths
    times = paths.times
    x = np.broadcast_to(np.asarray(x0, dtype=float), (P, 2 * n)).copy()
    steps = paths.n_steps
    states = np.empty((P, steps + 1, 2 * n)) if record else None
    cost = np.zeros((P, steps))
    if record:
        states[:, 0] = x
    acc = None
    xt_hist = None
    adv = None
    if nonlinear is not None:
        from .nonlinear import Cutoff

        acc = XtAccumulator(basis, nonlinear["weights"], P)
        cutoff = Cutoff(nonlinear["R"])
        adv = nonlinear.get("advection") or Advection(basis)
        xt_hist = np.empty((P, steps + 1))
        acc.update(x, times[0])
        xt_hist[:, 0] = acc.value()
    dts = np.diff(times)
    stiff = stiff_diagonal(basis)
    for k in range(steps):
        t = times[k]
        dt = dts[k]
        drift, noise = _drift_and_noise(x, n, coeffs, t)
        if policy is not None:
            inj, rate = policy.apply(k + t0_index, t, x)
            if inj is not None:
                drift[:, :n] += inj
                cost[:, k] = rate * dt
        if source is not None:
            F = source(k, t) if callable(source) else source[:, k]
            drift[:, :n] -= F
        if acc is not None:
            c = cutoff(acc.value())
            drift[:, :n] -= c[:, None] * adv(x[:, :n])
        x = (x + dt * drift + noise * paths.increments[:, k : k + 1]) / (1.0 + dt * stiff)
        if not np.all(np.isfinite(x)):
            raise PropagationError(k)
        if record:
            states[:, k + 1] = x
        if acc is not None:
            acc.update(x, times[k + 1])
            xt_hist[:, k + 1] = acc.value()
    if not record:
        states = x[:, None, :]
    rec = TrajectoryRecord(times=times, states=states, cost=cost, n_modes=n)
    if acc is not None:
        rec.xt = xt_hist
        rec.xt_blowup = acc.blowup
    return rec


# ---------------------------------------------------------------------------
# X_t norm of a recorded trajectory


@dataclass(frozen=True)
class XtValue:
    value: np.ndarray
    components: dict
    blowup: np.ndarray


def xt_norm(record, basis, weights, t=None):
    """X_t norm of every path of ``record`` up to time ``t`` (default: end).

    Sup over grid points, trapezoidal integrals; a state of exactly zero
    contributes zero even where ``rho_hat`` vanishes.
    """
    times = record.times
    t = times[-1] if t is None else float(t)
    if t < times[0] - 1e-14 or t > times[-1] + 1e-14:
        raise ValueError(f"t={t} outside recorded range [{times[0]}, {times[-1]}]")
    kmax = int(np.searchsorted(times, t + 1e-14 * max(1.0, abs(t)), side="right")) - 1
    acc = XtAccumulator(basis, weights, record.states.shape[0])
    for k in range(kmax + 1):
        acc.update(record.states[:, k], times[k])
    return XtValue(acc.value(), acc.components(), acc.blowup.copy())


# ---------------------------------------------------------------------------
# free dissipation


@dataclass(frozen=True)
class DecayReport:
    rate: float
    bound: float
    sigma: float
    k: int
    n_paths: int
    fit_residual: float
    small_ensemble: bool
    times: np.ndarray
    mean_energy: np.ndarray


def fit_log_rate(times, values):
    """Least-squares slope of ``-log(values)`` against ``times``; returns (rate, rms residual)."""
    lv = np.log(values)
    A = np.vstack([times, np.ones_like(times)]).T
    coef, *_ = np.linalg.lstsq(A, lv, rcond=None)
    resid = lv - A @ coef
    return float(-coef[0]), float(np.sqrt(np.mean(resid**2)))


def free_decay_rate(
    coeffs,
    k,
    n_paths,
    T,
    n_modes=8,
    dt=1e-5,
    seed=0,
    initial="random",
    basis=None,
):
    """Measure the exponential decay rate of ``E(||y||^2 + ||z||^2)`` with h = 0.

    Initial data have the first ``k`` modes of both components zero.
    ``initial="z_mode"`` uses ``z = phi_{k+1}``, ``y = 0``; ``"random"`` draws
    i.i.d. standard normal coefficients on the remaining modes (seeded).
    Returns the fitted rate and the dissipation bound ``2 lam_{k+1} - sigma``.
    """
    basis = basis or _basis.SpectralBasis(n_modes)
    n = basis.n_modes
    if not 0 <= k < n:
        raise ValueError("band index k must satisfy 0 <= k < n_modes")
    n_steps = int(round(T / dt))
    paths = brownian_batch(uniform_times(T, n_steps), n_paths, seed)
    x0 = np.zeros((n_paths, 2 * n))
    if initial == "z_mode":
        x0[:, n + k] = 1.0
    elif initial == "random":
        rng = np.random.default_rng(np.random.SeedSequence(int(seed)).spawn(1)[0].spawn(1)[0])
        x0[:, k:n] = rng.standard_normal((n_paths, n - k))
        x0[:, n + k :] = rng.standard_normal((n_paths, n - k))
    else:
        raise ValueError(f"unknown initial data kind {initial!r}")
    rec = simulate(basis, coeffs, x0, paths, record=True)
    E = rec.mean_energy()
    rate, resid = fit_log_rate(rec.times, E)
    sigma = coeffs.sigma(T)
    bound = 2.0 * basis.lam[k] - sigma
    small = n_paths < 50
    if small:
        log.warning("ensemble of %d paths is too small for a stable rate fit", n_paths)
    return DecayReport(
        rate=rate,
        bound=float(bound),
        sigma=float(sigma),
        k=k,
        n_paths=n_paths,
        fit_residual=resid,
        small_ensemble=small,
        times=rec.times,
        mean_energy=E,
    )
