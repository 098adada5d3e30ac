"""Weight functions: the Carleman weights built on an auxiliary bump ``psi``
and the time weights of the source-term construction.

Source-method weights blow down like ``exp(-c / (T - t))``; they are evaluated
in log form (``log_*`` functions) and as functions of the remaining time
``s = T - t`` wherever cancellation near ``t = T`` would cost precision.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.polynomial import Polynomial


class WeightParameterError(ValueError):
    pass


# ---------------------------------------------------------------------------
# auxiliary function psi


@dataclass(frozen=True)
class Psi:
    """Quartic bump on [0, 1] with a single interior critical point."""

    poly: Polynomial
    center: float
    d1: tuple

    def __call__(self, x):
        return self.poly(np.asarray(x, dtype=float))

    def deriv(self, x, order=1):
        return self.poly.deriv(order)(np.asarray(x, dtype=float))

    @property
    def sup(self):
        return float(self.poly(self.center))


def psi_build(d1_interval):
    """Quartic ``psi`` with ``psi(0) = psi(1) = 0``, ``psi > 0`` inside and
    ``psi'`` vanishing only at a point of ``d1_interval``.

    ``psi' = (c - x) q(x)`` with ``q = w x^2 + (1 - w)(1 - x)^2 > 0``; the
    weight ``w`` makes ``c`` the mean of the density ``q``, which forces
    ``psi(1) = 0``.  This places ``c`` anywhere in (1/4, 3/4).
    """
    a, b = map(float, d1_interval)
    if not 0.0 < a < b < 1.0:
        raise WeightParameterError(f"d1 interval {d1_interval} must lie strictly inside (0, 1)")
    lo, hi = max(a, 0.25), min(b, 0.75)
    if lo >= hi:
        raise WeightParameterError(
            f"d1 interval {d1_interval} must meet (1/4, 3/4) for the quartic construction"
        )
    c = 0.5 * (a + b)
    if not lo < c < hi:
        c = 0.5 * (lo + hi)
    w = 2.0 * (c - 0.25)
    x = Polynomial([0.0, 1.0])
    q = w * x**2 + (1.0 - w) * (1.0 - x) ** 2
    dpsi = (c - x) * q
    poly = dpsi.integ(lbnd=0.0)
    # remove the rounding-level value at x = 1, then normalise sup psi = 1
    poly = poly - poly(1.0) * x
    poly = poly / poly(c)
    return Psi(poly=poly, center=c, d1=(a, b))


# ---------------------------------------------------------------------------
# Carleman weights


@dataclass(frozen=True)
class CarlemanParams:
    mu: float
    lam: float
    m: int
    k_const: float
    psi: Psi
    T: float
    c1: float = field(init=False)
    c2: float = field(init=False)

    def __post_init__(self):
        if self.mu <= 0 or self.lam <= 0:
            raise WeightParameterError("mu and lambda must be positive")
        if not self.m > 3:
            raise WeightParameterError(f"m must exceed 3, got {self.m}")
        if not self.k_const > self.m:
            raise WeightParameterError(f"k must exceed m, got k={self.k_const}, m={self.m}")
        if self.T <= 0:
            raise WeightParameterError("horizon T must be positive")
        sup = self.psi.sup
        object.__setattr__(self, "c2", self.k_const * sup)
        object.__setattr__(self, "c1", self.k_const * (self.m + 1) / self.m * sup)

    def with_lambda(self, lam):
        return replace(self, lam=lam)


def default_carleman(T=1.0, d1=(0.45, 0.55), mu=1.0, lam=1.0, m=4, k_const=5.0):
    return CarlemanParams(mu=mu, lam=lam, m=m, k_const=k_const, psi=psi_build(d1), T=T)


@dataclass(frozen=True)
class CarlemanValues:
    alpha: np.ndarray
    phi: np.ndarray
    theta: np.ndarray
    log_theta: np.ndarray
    singular: np.ndarray


def carleman_eval(p, x, t):
    """Evaluate ``(alpha_m, phi_m, theta)`` on the broadcast of ``x`` and ``t``.

    At ``t`` in {0, T} the singular flag is set, ``theta = 0`` and
    ``phi = +inf``.
    """
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    x, t = np.broadcast_arrays(x, t)
    singular = (t <= 0.0) | (t >= p.T)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = 1.0 / (t * (p.T - t)) ** p.m
        num = np.exp(p.mu * (p.psi(x) + p.c2))
        alpha = (num - np.exp(p.mu * p.c1)) * g
        phi = num * g
        log_theta = p.lam * alpha
    alpha = np.where(singular, -np.inf, alpha)
    phi = np.where(singular, np.inf, phi)
    log_theta = np.where(singular, -np.inf, log_theta)
    return CarlemanValues(alpha, phi, np.exp(log_theta), log_theta, singular)


@dataclass(frozen=True)
class BoundReport:
    C_time: float
    C_space: float
    eps: float
    n_t: int
    n_x: int


def carleman_bounds_check(p, q, n_t=1000, n_x=1000, eps=None):
    """Smallest constants for the two weight-derivative bounds on a grid.

    ``C_time``: ``|d/dt (theta* phi*^q)| <= C lam phi*^(1+1/m) theta* phi*^q``
    with starred quantities taken at the boundary ``x = 0``.
    ``C_space``: ``|d/dx (theta^2 phi^q)| <= C lam phi theta^2 phi^q``.
    Derivatives are centred finite differences of the logarithm, so the
    exponentially small ``theta`` never underflows.  Times within ``eps`` of
    0 or T are excluded.
    """
    if q < 1:
        raise ValueError("q must be a positive integer")
    eps = 0.01 * p.T if eps is None else float(eps)
    t = np.linspace(eps, p.T - eps, n_t)
    x = np.linspace(0.0, 1.0, n_x)

    # time bound at the boundary point
    vals = carleman_eval(p, 0.0, t)
    log_f = vals.log_theta + q * np.log(vals.phi)
    dlog = np.gradient(log_f, t, edge_order=2)
    ratio_t = np.abs(dlog) / (p.lam * vals.phi ** (1.0 + 1.0 / p.m))
    C_time = float(np.max(ratio_t))

    # space bound on the full grid
    X, Tt = np.meshgrid(x, t)
    vals = carleman_eval(p, X, Tt)
    log_g = 2.0 * vals.log_theta + q * np.log(vals.phi)
    dlog = np.gradient(log_g, x, axis=1, edge_order=2)
    ratio_x = np.abs(dlog) / (p.lam * vals.phi)
    C_space = float(np.max(ratio_x))
    return BoundReport(C_time=C_time, C_space=C_space, eps=eps, n_t=n_t, n_x=n_x)


# ---------------------------------------------------------------------------
# source-method weights


@dataclass(frozen=True)
class SourceWeightParams:
    M: float = 1.0
    P: float = 4.0
    Q: float = 1.2
    zeta: float = 3.8
    T: float = 0.5

    def __post_init__(self):
        if not self.M > 0:
            raise WeightParameterError(f"M must be positive, got {self.M}")
        if not 0.0 < self.T < 1.0:
            raise WeightParameterError(f"T must lie in (0, 1), got {self.T}")
        if not 1.0 < self.Q < np.sqrt(2.0):
            raise WeightParameterError(f"Q must lie in (1, sqrt 2), got {self.Q}")
        pmin = self.Q**2 / (2.0 - self.Q**2)
        if not self.P > pmin:
            raise WeightParameterError(f"P must exceed Q^2/(2-Q^2) = {pmin:.6g}, got {self.P}")
        zlo = (1.0 + self.P) * self.Q**2 / 2.0
        if not zlo < self.zeta < self.P:
            raise WeightParameterError(
                f"zeta must lie in ((1+P)Q^2/2, P) = ({zlo:.6g}, {self.P}), got {self.zeta}"
            )

    # exponent coefficients: log weight = -coef / (T - t)
    @property
    def k_rho0(self):
        return self.M * self.P / (self.Q - 1.0)

    @property
    def k_rho(self):
        return (1.0 + self.P) * self.Q**2 * self.M / (self.Q - 1.0)

    @property
    def k_rho_hat(self):
        return self.M * self.zeta / (self.Q - 1.0)

    def with_M(self, M):
        return replace(self, M=float(M))


def _log_weight(coef, s):
    s = np.asarray(s, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(s > 0, -coef / np.where(s > 0, s, 1.0), -np.inf)


def log_gamma(p, t):
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise WeightParameterError("gamma(t) = exp(M/t) is undefined for t <= 0")
    return p.M / t


def log_rho0_remaining(p, s):
    return _log_weight(p.k_rho0, s)


def log_rho_remaining(p, s):
    return _log_weight(p.k_rho, s)


def log_rho_hat_remaining(p, s):
    return _log_weight(p.k_rho_hat, s)


def _remaining(p, t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > p.T):
        raise WeightParameterError(f"t must lie in [0, T={p.T}]")
    return p.T - t


def log_rho0(p, t):
    return log_rho0_remaining(p, _remaining(p, t))


def log_rho(p, t):
    return log_rho_remaining(p, _remaining(p, t))


def log_rho_hat(p, t):
    return log_rho_hat_remaining(p, _remaining(p, t))


def source_weights_eval(p, t):
    """``(gamma, rho0, rho, rho_hat)`` at ``t``; the rho family is 0 at ``t = T``."""
    t = np.asarray(t, dtype=float)
    gam = np.exp(log_gamma(p, t))
    return gam, np.exp(log_rho0(p, t)), np.exp(log_rho(p, t)), np.exp(log_rho_hat(p, t))


@dataclass(frozen=True)
class SourceGrid:
    times: np.ndarray
    remaining: np.ndarray
    lengths: np.ndarray


def source_grid(p, K):
    """Times ``T_k = T - T/Q^k`` for ``k = 0..K``.

    ``remaining[k] = T/Q^k`` and ``lengths[k] = T_{k+1} - T_k = T (Q-1)/Q^(k+1)``
    are computed directly rather than by subtraction.
    """
    k = np.arange(int(K) + 1)
    remaining = p.T / p.Q**k
    times = p.T - remaining
    lengths = p.T * (p.Q - 1.0) / p.Q ** (k[:-1] + 1)
    return SourceGrid(times=times, remaining=remaining, lengths=lengths)


def weight_relation_residual(p, k):
    """Relative mismatch of ``log rho0(T_{k+2})`` against
    ``log rho(T_k) + log gamma(T_{k+2} - T_{k+1})``."""
    g = source_grid(p, k + 2)
    lhs = log_rho0_remaining(p, g.remaining[k + 2])
    rhs = log_rho_remaining(p, g.remaining[k]) + log_gamma(p, g.lengths[k + 1])
    return float(abs(lhs - rhs) / abs(lhs))


def fitted_weight_constants(p, n=20001, s_min=None):
    """Smallest constants in the weight comparisons on a dense grid of [0, T).

    Returns a dict of ``sup`` ratios for ``rho0 <= C rho_hat``,
    ``rho <= C rho_hat``, ``|rho_hat'| rho0 <= C rho_hat^2`` and
    ``rho_hat^2 <= C rho``, each computed from log weights.
    """
    s_min = p.T * 1e-4 if s_min is None else s_min
    s = np.geomspace(s_min, p.T, n)
    l0 = log_rho0_remaining(p, s)
    lr = log_rho_remaining(p, s)
    lh = log_rho_hat_remaining(p, s)
    # rho_hat' = -(k_hat / s^2) rho_hat
    l_dh = np.log(p.k_rho_hat / s**2) + lh
    return {
        "rho0_over_rho_hat": float(np.exp(np.max(l0 - lh))),
        "rho_over_rho_hat": float(np.exp(np.max(lr - lh))),
        "drho_hat_rho0_over_rho_hat2": float(np.exp(np.max(l_dh + l0 - 2 * lh))),
        "rho_hat2_over_rho": float(np.exp(np.max(2 * lh - lr))),
    }
