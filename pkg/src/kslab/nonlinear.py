"""Truncated semilinear problem: cutoff ``phi_R``, ``f_R = phi_R(X_t) y y_x``,
the fixed-point map ``F -> f_R(y[F])`` on top of the source-term control, and
the Monte Carlo certificate for staying below ``R`` with high probability.

The calibrated constant ``C_hat`` used for ``R = exp(-C_hat/T)`` is the
cost-curve constant plus the weight exponent ``M zeta/(Q - 1)`` of
``rho_hat(0)``, so that ``X_T^2 <= exp(2 C_hat/T) |data|^2`` can hold at all
(``X_T`` already contains ``|y0|/rho_hat(0)``).
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from . import basis as _basis
from .sde import Advection, XtAccumulator, brownian_batch, simulate
from .sourceterm import block_times, source_term_control, truncation_index
from .weights import log_rho, log_rho_hat

log = logging.getLogger(__name__)


class FixedPointFailure(RuntimeError):
    def __init__(self, msg, history=None):
        super().__init__(msg)
        self.history = history


# ---------------------------------------------------------------------------
# cutoff


class Cutoff:
    """``phi_R``: 1 on ``[0, R]``, 0 on ``[2R, inf)``, quintic smoothstep between."""

    PROFILE_SLOPE = 15.0 / 8.0

    def __init__(self, R):
        if not R > 0:
            raise ValueError(f"cutoff radius must be positive, got {R}")
        self.R = float(R)

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        u = np.clip((s - self.R) / self.R, 0.0, 1.0)
        out = 1.0 - u**3 * (10.0 - 15.0 * u + 6.0 * u**2)
        return np.where(np.isnan(s), 0.0, out)

    def derivative(self, s):
        s = np.asarray(s, dtype=float)
        u = (s - self.R) / self.R
        inside = (u > 0) & (u < 1)
        return np.where(inside, -30.0 * u**2 * (1 - u) ** 2 / self.R, 0.0)

    @property
    def max_derivative(self):
        return self.PROFILE_SLOPE / self.R

    def __repr__(self):
        return f"Cutoff(R={self.R:g})"


def cutoff_eval(c, s):
    s = np.asarray(s, dtype=float)
    if np.any(s < 0):
        raise ValueError("cutoff argument must be nonnegative")
    return c(s)


def f_R_eval(basis, y, z, xt_value, c, advection=None):
    """Modal ``phi_R(xt_value) y y_x`` (``z`` enters only through ``xt_value``)."""
    adv = advection or Advection(basis)
    y = np.asarray(y, dtype=float)
    f = adv(np.atleast_2d(y))
    w = np.atleast_1d(c(np.asarray(xt_value, dtype=float)))
    out = w[:, None] * f
    return out if y.ndim > 1 else out[0]


# ---------------------------------------------------------------------------
# running X_t along a stored trajectory


def running_xt(basis, states, times, p, upto=None):
    """Running X_t value at every grid time (paths, nt); after index ``upto``
    the value is frozen (used to stop at ``T_K``)."""
    P, nt, _ = states.shape
    acc = XtAccumulator(basis, p, P)
    out = np.empty((P, nt))
    last = nt - 1 if upto is None else int(upto)
    for k in range(nt):
        if k <= last:
            acc.update(states[:, k], times[k])
        out[:, k] = acc.value()
    return out, acc


def nonlinear_source(basis, states, times, p, cutoff, upto, advection=None):
    """Left-point ``f_R`` series ``(paths, steps, n)`` for a trajectory; zero on
    steps at or beyond ``upto`` (the free tail)."""
    adv = advection or Advection(basis)
    xt, _ = running_xt(basis, states, times, p, upto)
    n = basis.n_modes
    P, nt, _ = states.shape
    F = np.zeros((P, nt - 1, n))
    for k in range(min(nt - 1, upto)):
        w = cutoff(xt[:, k])
        if np.any(w > 0):
            F[:, k] = w[:, None] * adv(states[:, k, :n])
    return F, xt


def s_norm(F, times, p):
    """Per-path ``(int |F/rho|^2 dt)^(1/2)`` with left-point quadrature."""
    dts = np.diff(times)
    lr = log_rho(p, times[:-1])
    sq = np.sum(F**2, axis=2)
    with np.errstate(over="ignore", invalid="ignore"):
        v = np.where(sq > 0, sq * np.exp(-2 * lr)[None, :], 0.0)
    return np.sqrt(np.sum(v * dts[None, :], axis=1))


# ---------------------------------------------------------------------------
# Lipschitz probe


@dataclass(frozen=True)
class LipschitzReport:
    constant: float
    left: np.ndarray
    right: np.ndarray
    max_xt: tuple


def lipschitz_probe(basis, states1, states2, times, p, R, upto=None, advection=None):
    """Smallest ``C`` with ``|(f_R(y1) - f_R(y2))/rho| <= C R (|(y1,z1) - (y2,z2)|_{X_t}
    + |(y1 - y2)/rho_hat|_{H^1})`` at every grid time (path-wise, single path
    arrays ``(nt, 2n)`` or batches)."""
    s1 = np.atleast_3d(states1) if np.ndim(states1) == 3 else np.asarray(states1)[None]
    s2 = np.atleast_3d(states2) if np.ndim(states2) == 3 else np.asarray(states2)[None]
    n = basis.n_modes
    nt = s1.shape[1]
    upto = nt - 1 if upto is None else upto
    c = Cutoff(R)
    adv = advection or Advection(basis)
    xt1, _ = running_xt(basis, s1, times, p, upto)
    xt2, _ = running_xt(basis, s2, times, p, upto)
    xtd, _ = running_xt(basis, s1 - s2, times, p, upto)
    wh1 = _basis.sobolev_weights(basis, 1)
    left = np.zeros((s1.shape[0], upto + 1))
    right = np.zeros_like(left)
    for k in range(upto + 1):
        f1 = c(xt1[:, k])[:, None] * adv(s1[:, k, :n])
        f2 = c(xt2[:, k])[:, None] * adv(s2[:, k, :n])
        lr = float(log_rho(p, times[k]))
        lh = float(log_rho_hat(p, times[k]))
        left[:, k] = np.sqrt(np.sum((f1 - f2) ** 2, axis=1)) * math.exp(-lr)
        dy = s1[:, k, :n] - s2[:, k, :n]
        right[:, k] = R * (xtd[:, k] + np.sqrt((dy**2) @ wh1) * math.exp(-lh))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(right > 0, left / np.where(right > 0, right, 1.0), np.where(left > 0, np.inf, 0.0))
    return LipschitzReport(float(np.max(ratio)), left, right, (float(np.max(xt1)), float(np.max(xt2))))


# ---------------------------------------------------------------------------
# fixed point


def theorem_constant(C_lr, p):
    """``C_hat`` for the nonlinear statements: cost constant plus the
    exponent of ``1/rho_hat(0)``."""
    return float(C_lr) + p.k_rho_hat


@dataclass(frozen=True)
class TheoremConstant:
    C_hat: float
    C_lr: float
    C_weight: float
    C_linear: float
    max_ratio: float

    def to_dict(self):
        return dict(self.__dict__)


def calibrate_theorem_constant(basis, coeffs, p, C_lr, n_paths=50, seed=12345, margin=2.0,
                               steps_per_block=200, tail_steps=100, **control_kw):
    """``C_hat = max(C_lr + M zeta/(Q-1), C_linear)``.

    ``C_linear = (T/2) log(margin * max X_{T_K}^2 / |data|^2)`` over a linear
    (``F = 0``) source-term run from random unit data; it is the smallest
    constant for which the linear estimate ``X^2 <= exp(2C/T) |data|^2`` was
    observed, times ``margin``.
    """
    K = truncation_index(p)
    times, starts = block_times(p, K, steps_per_block, tail_steps)
    paths = brownian_batch(times, n_paths, seed)
    x0 = sample_small_data(basis, n_paths, 1.0, seed)
    res = source_term_control(basis, coeffs, x0, p, paths, K=K, block_starts=starts, **control_kw)
    xt, _ = running_xt(basis, res.states, times, p, int(starts[-1]))
    ratio = xt[:, int(starts[-1])] ** 2 / data_norm_sq(basis, x0)
    mr = float(np.max(ratio))
    C_lin = 0.5 * p.T * math.log(margin * mr)
    C_w = float(C_lr) + p.k_rho_hat
    return TheoremConstant(max(C_w, C_lin), float(C_lr), C_w, C_lin, mr)


def data_norm_sq(basis, x):
    """``|y|_{H^2}^2 + |z|_{H^1}^2`` per path."""
    n = basis.n_modes
    x = np.atleast_2d(x)
    return (x[:, :n] ** 2) @ _basis.sobolev_weights(basis, 2) + (x[:, n:] ** 2) @ _basis.sobolev_weights(basis, 1)


@dataclass
class FixedPointResult:
    converged: bool
    iterations: int
    distances: list
    ratios: list
    final: object  # SourceTermResult
    F: np.ndarray = field(repr=False, default=None)
    xt: np.ndarray = field(repr=False, default=None)  # running X_t (paths, nt)
    XT: np.ndarray = None  # per path X_{T_K}
    yT_norm: float = 0.0  # E |y(T)|
    data_scale: float = 0.0
    xt_estimate_lhs: float = 0.0
    xt_estimate_rhs: float = 0.0
    C_hat: float = float("nan")
    R: float = float("nan")

    @property
    def xt_estimate_holds(self):
        return self.xt_estimate_lhs <= self.xt_estimate_rhs

    def to_dict(self):
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "distances": self.distances,
            "ratios": self.ratios,
            "yT_norm": self.yT_norm,
            "data_scale": self.data_scale,
            "xt_estimate_lhs": self.xt_estimate_lhs,
            "xt_estimate_rhs": self.xt_estimate_rhs,
            "xt_estimate_holds": self.xt_estimate_holds,
            "C_hat": self.C_hat,
            "R": self.R,
            "source_term": self.final.to_dict() if self.final is not None else None,
        }


def fixed_point_solve(
    basis,
    coeffs,
    x0,
    p,
    R,
    paths,
    block_starts,
    K,
    C_hat,
    max_iters=20,
    tol=1e-8,
    **control_kw,
):
    """Iterate ``F^0 = 0``, ``F^{n+1} = f_R(y[F^n])`` with ``y[F]`` the
    source-term controlled trajectory; common random numbers across iterates.

    Convergence: S-norm distance of successive iterates below ``tol`` relative
    to the S-norm of the iterate (or exactly zero).  Three consecutive
    distance ratios ``>= 1`` raise :class:`FixedPointFailure`.
    """
    if not R > 0:
        raise ValueError("R must be positive")
    adv = Advection(basis)
    cutoff = Cutoff(R)
    times = paths.times
    upto = int(block_starts[-1])
    F = None
    dists, ratios = [], []
    bad = 0
    converged = False
    res = xt = None
    it = 0
    for it in range(1, max_iters + 1):
        res = source_term_control(basis, coeffs, x0, p, paths, F=F, K=K, block_starts=block_starts, **control_kw)
        Fn, xt = nonlinear_source(basis, res.states, times, p, cutoff, upto, adv)
        diff = Fn if F is None else Fn - F
        d = float(np.sqrt(np.mean(s_norm(diff, times, p) ** 2)))
        scale = float(np.sqrt(np.mean(s_norm(Fn, times, p) ** 2)))
        dists.append(d)
        if len(dists) > 1:
            ratios.append(d / dists[-2] if dists[-2] > 0 else 0.0)
            bad = bad + 1 if ratios[-1] >= 1 else 0
        F = Fn
        if d == 0.0 or d <= tol * scale:
            converged = True
            break
        if bad >= 3:
            raise FixedPointFailure("iterates do not contract; use a smaller R", dists)
    # final trajectory with the converged source
    if converged and dists[-1] > 0:
        res = source_term_control(basis, coeffs, x0, p, paths, F=F, K=K, block_starts=block_starts, **control_kw)
        _, xt = nonlinear_source(basis, res.states, times, p, cutoff, upto, adv)
    XT = xt[:, upto]
    n = basis.n_modes
    dn = data_norm_sq(basis, np.broadcast_to(np.asarray(x0, float), (paths.n_paths, 2 * n)))
    lhs = float(np.mean(XT**2))
    log_rhs = 2 * C_hat / p.T + math.log(float(np.mean(dn))) if np.mean(dn) > 0 else -math.inf
    rhs = math.exp(log_rhs) if log_rhs < 700 else math.inf
    return FixedPointResult(
        converged=converged,
        iterations=it,
        distances=dists,
        ratios=ratios,
        final=res,
        F=F,
        xt=xt,
        XT=XT,
        yT_norm=float(np.mean(np.sqrt(np.sum(res.states[:, -1, :n] ** 2, axis=1)))),
        data_scale=float(np.mean(np.sqrt(dn))),
        xt_estimate_lhs=lhs,
        xt_estimate_rhs=rhs,
        C_hat=float(C_hat),
        R=float(R),
    )


def truncated_replay(basis, coeffs, fp, p, R):
    """Re-simulate the truncated semilinear system directly (nonlinearity in
    the stepper, recorded control) on the same paths; returns the max modal
    deviation from the fixed-point trajectory over ``[0, T_K]``."""
    res = fp.final
    upto = int(res.block_starts[-1])
    inj = res.injections

    class _Replay:
        def apply(self, k, t, x):
            return inj[:, k], 0.0

    win = res.paths.window(0, upto)
    rec = simulate(basis, coeffs, res.states[:, 0], win, policy=_Replay(),
                   nonlinear={"R": R, "weights": p})
    return float(np.max(np.abs(rec.states - res.states[:, : upto + 1]))), rec


# ---------------------------------------------------------------------------
# certificate


def wilson_interval(k, n, conf=0.95):
    """Wilson score interval for a binomial proportion."""
    if n <= 0:
        raise ValueError("need at least one trial")
    z = norm.ppf(0.5 + conf / 2)
    phat = k / n
    den = 1 + z**2 / n
    centre = (phat + z**2 / (2 * n)) / den
    half = z * math.sqrt(phat * (1 - phat) / n + z**2 / (4 * n**2)) / den
    lo = 0.0 if k == 0 else max(0.0, centre - half)
    hi = 1.0 if k == n else min(1.0, centre + half)
    return float(lo), float(hi)


@dataclass
class Certificate:
    delta: float
    epsilon: float
    R: float
    C_hat: float
    T: float
    paths: int
    exceedance_count: int
    exceedance_fraction: float
    ci_half_width: float
    empirical_mean_XT2: float
    markov_bound: float
    markov_ok: bool
    epsilon_ok: bool
    wide_ci_warning: bool
    fixed_point_converged: bool

    def to_dict(self):
        return dict(self.__dict__)


def sample_small_data(basis, n_paths, delta, seed, n_active=4):
    """Random smooth data with ``|y|_{H^2}^2 + |z|_{H^1}^2 <= delta^2`` per path.

    Directions use the first ``n_active`` modes of both components; radii are
    ``delta * U`` with ``U ~ Uniform(0, 1)``.  Drawn from a stream separate
    from the Brownian increments.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    n = basis.n_modes
    m = min(n_active, n)
    x = np.zeros((n_paths, 2 * n))
    x[:, :m] = rng.standard_normal((n_paths, m))
    x[:, n : n + m] = rng.standard_normal((n_paths, m))
    nrm = np.sqrt(data_norm_sq(basis, x))
    rad = delta * rng.uniform(0.0, 1.0, n_paths)
    return x * (rad / nrm)[:, None]


def _certificate_chunk(job):
    basis, coeffs, x0, p, R, times, starts, K, C_hat, seed, first, control_kw = job
    paths = brownian_batch(times, x0.shape[0], seed, first_path=first)
    fp = fixed_point_solve(basis, coeffs, x0, p, R, paths, starts, K, C_hat, **control_kw)
    return fp.XT, fp.converged


def statistical_certificate(
    basis,
    coeffs,
    p,
    C_hat,
    epsilon=0.1,
    n_paths=1000,
    seed=0,
    delta=None,
    R=None,
    steps_per_block=200,
    tail_steps=100,
    chunk=250,
    conf=0.95,
    workers=1,
    **control_kw,
):
    """Monte Carlo check of ``P(sup_t X_t <= R) >= 1 - epsilon`` for data of
    size ``<= delta``, with ``R = exp(-C_hat/T)``, ``delta = exp(-2 C_hat/T) sqrt(epsilon)``.

    ``X`` is evaluated up to ``T_K`` (weights are negligible afterwards).
    Paths run in chunks to bound memory (optionally on ``workers``
    processes); results do not depend on ``workers``, and
    on ``chunk`` only through BLAS rounding (counts are unaffected).
    """
    T = p.T
    R = math.exp(-C_hat / T) if R is None else R
    delta = math.exp(-2 * C_hat / T) * math.sqrt(epsilon) if delta is None else delta
    K = truncation_index(p)
    times, starts = block_times(p, K, steps_per_block, tail_steps)
    x0_all = sample_small_data(basis, n_paths, delta, seed)
    XT = np.empty(n_paths)
    jobs = [
        (basis, coeffs, x0_all[a:min(n_paths, a + chunk)], p, R, times, starts, K, C_hat, seed, a, control_kw)
        for a in range(0, n_paths, chunk)
    ]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            out = list(ex.map(_certificate_chunk, jobs))
    else:
        out = [_certificate_chunk(j) for j in jobs]
    conv = True
    for job, (xt_chunk, ok) in zip(jobs, out):
        a = job[10]
        XT[a:a + len(xt_chunk)] = xt_chunk
        conv = conv and ok
    count = int(np.sum(XT > R))
    frac = count / n_paths
    lo, hi = wilson_interval(count, n_paths, conf)
    half = float(max(frac - lo, hi - frac))
    mean2 = float(np.mean(XT**2))
    markov = mean2 / R**2
    if n_paths < 100:
        log.warning("fewer than 100 paths: confidence interval is wide")
    return Certificate(
        delta=delta,
        epsilon=epsilon,
        R=R,
        C_hat=float(C_hat),
        T=T,
        paths=n_paths,
        exceedance_count=count,
        exceedance_fraction=frac,
        ci_half_width=half,
        empirical_mean_XT2=mean2,
        markov_bound=markov,
        markov_ok=bool(frac <= markov + 2 * half),
        epsilon_ok=bool(frac <= epsilon + half),
        wide_ci_warning=n_paths < 100,
        fixed_point_converged=conv,
    )
