"""Lebeau-Robbiano null control for the linear system.

Each dyadic interval ``[T_{j-1}, T_j]`` of length ``tau_j = T/2^j`` controls
the band ``mu_i <= r_j = beta^2 16^j`` on its first half with penalised
linear-quadratic feedback, then lets everything decay freely on the second
half.  Controls are ``h = chi_D0 sum_{i in band} u_i phi_i``, so the cost
``int_D0 |h|^2 = u^T B u`` with ``B`` the D0 mass matrix of the band.

The feedback applied in simulation comes from the discrete-time Riccati
recursion matched to the semi-implicit scheme; :func:`riccati_backward`
integrates the continuous Riccati equation and serves as its reference.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .basis import SpectralBasis
from .sde import brownian_batch, simulate, uniform_times

log = logging.getLogger(__name__)

D0_DEFAULT = (0.3, 0.7)


class ControlError(RuntimeError):
    pass


class RiccatiIntegrationError(ControlError):
    pass


class SynthesisFailure(ControlError):
    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class LRInterval:
    j: int
    start: float
    end: float
    tau: float
    r: float
    band_size: int


@dataclass(frozen=True)
class LRSchedule:
    T: float
    beta: float
    n_modes: int
    intervals: tuple

    @property
    def J(self):
        return len(self.intervals)

    @property
    def controlled_time(self):
        return math.fsum(iv.tau for iv in self.intervals)

    def to_dict(self):
        return {
            "T": self.T,
            "beta": self.beta,
            "n_modes": self.n_modes,
            "intervals": [iv.__dict__ for iv in self.intervals],
        }


def lr_schedule(T, beta, n_modes):
    """Dyadic intervals ``tau_j = T/2^j``, ``r_j = beta^2 16^j``, stopping at
    the first ``j`` whose band holds all ``n_modes`` modes."""
    if not T > 0 or not beta > 0:
        raise ValueError("T and beta must be positive")
    basis = SpectralBasis(n_modes)
    out = []
    start = 0.0
    j = 0
    while True:
        j += 1
        tau = T / 2.0**j
        r = beta**2 * 16.0**j
        k = basis.band_size(r)
        end = T - T / 2.0**j
        out.append(LRInterval(j, start, end, tau, r, k))
        start = end
        if k >= n_modes:
            break
        if j > 200:
            raise ValueError("schedule did not reach the full band")
    return LRSchedule(float(T), float(beta), int(n_modes), tuple(out))


# ---------------------------------------------------------------------------
# band matrices


def _band_index(basis, band):
    if np.isscalar(band):
        return np.flatnonzero(basis.band(band))
    band = np.asarray(band)
    if band.dtype == bool:
        return np.flatnonzero(band)
    return band.astype(int)


def band_system(basis, coeffs, band, d0=D0_DEFAULT, t=0.0):
    """Continuous band matrices ``(A, C, G, Rw)`` for the stacked band state
    ``[y_band, z_band]``: ``dX = (A X + G u) dt + C X dW``, running cost
    ``u^T Rw u``."""
    idx = _band_index(basis, band)
    k = idx.size
    if k == 0:
        raise ControlError("empty control band")
    a1, a2, a3, a4 = coeffs.drift(t)
    b1, b2, b3 = coeffs.noise(t)
    I = np.eye(k)
    mu = np.diag(basis.mu[idx])
    lam = np.diag(basis.lam[idx])
    A = np.block([[-mu + a1 * I, a2 * I], [a3 * I, -lam + a4 * I]])
    C = np.block([[b1 * I, b2 * I], [np.zeros((k, k)), b3 * I]])
    Bbb = np.asarray(basis.mass_matrix(d0))[np.ix_(idx, idx)]
    G = np.vstack([Bbb, np.zeros((k, k))])
    return A, C, G, Bbb.copy()


# ---------------------------------------------------------------------------
# continuous Riccati (reference)


@dataclass(frozen=True)
class RiccatiSolution:
    times: np.ndarray  # forward times in [0, tau]
    P: np.ndarray  # (len(times), d, d)
    epsilon: float
    band: np.ndarray

    def at(self, t):
        k = int(np.argmin(np.abs(self.times - t)))
        return self.P[k]


def solve_riccati(A, C, G, Rw, P_T, tau, n_eval=201, rtol=1e-11, atol=1e-13):
    """Integrate ``-dP/dt = A'P + PA + C'PC - P G Rw^-1 G' P`` backward from
    ``P(tau) = P_T`` with an implicit (Radau) integrator.

    Returned ``P`` is indexed by forward time ``np.linspace(0, tau, n_eval)``.
    """
    A = np.atleast_2d(A)
    C = np.atleast_2d(C)
    G = np.atleast_2d(G)
    Rw = np.atleast_2d(Rw)
    d = A.shape[0]
    S = G @ np.linalg.solve(Rw, G.T)

    def rhs(s, p):
        P = p.reshape(d, d)
        dP = A.T @ P + P @ A + C.T @ P @ C - P @ S @ P
        return dP.ravel()

    def jac(s, p):
        P = p.reshape(d, d)
        I = np.eye(d)
        # d(vec dP) / d(vec P) for row-major vec
        L = A.T - P @ S
        Rm = A - S @ P
        return np.kron(L, I) + np.kron(I, Rm.T) + np.kron(C.T, C.T)

    s_eval = np.linspace(0.0, tau, n_eval)
    sol = solve_ivp(rhs, (0.0, tau), np.asarray(P_T, float).ravel(), method="Radau",
                    t_eval=s_eval, rtol=rtol, atol=atol, jac=jac)
    if not sol.success:
        raise RiccatiIntegrationError(sol.message)
    P = sol.y.T.reshape(-1, d, d)[::-1]
    P = 0.5 * (P + np.transpose(P, (0, 2, 1)))
    scale = max(1.0, float(np.max(np.abs(P))))
    for Pk in P:
        if np.min(np.linalg.eigvalsh(Pk)) < -1e-8 * scale:
            raise RiccatiIntegrationError("Riccati solution lost positive semidefiniteness; reduce the step")
    return s_eval, P


def riccati_backward(basis, band, coeffs, tau, epsilon, d0=D0_DEFAULT, n_eval=201):
    """Continuous penalised LQ Riccati solution on ``[0, tau]`` for a band,
    terminal weight ``(1/epsilon) I`` on the band state."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    idx = _band_index(basis, band)
    A, C, G, Rw = band_system(basis, coeffs, idx, d0)
    d = A.shape[0]
    if math.isinf(epsilon):
        times = np.linspace(0.0, tau, n_eval)
        return RiccatiSolution(times, np.zeros((n_eval, d, d)), epsilon, idx)
    times, P = solve_riccati(A, C, G, Rw, np.eye(d) / epsilon, tau, n_eval=n_eval)
    return RiccatiSolution(times, P, float(epsilon), idx)


def scalar_riccati_closed_form(a, epsilon, tau, t):
    """``p(t)`` for ``dX = (aX + u) dt``, cost ``int u^2 + X(tau)^2/epsilon``."""
    t = np.asarray(t, dtype=float)
    if a == 0:
        q = epsilon + (tau - t)
    else:
        q = 1.0 / (2 * a) + (epsilon - 1.0 / (2 * a)) * np.exp(2 * a * (t - tau))
    return 1.0 / q


# ---------------------------------------------------------------------------
# discrete Riccati matched to the scheme


def discrete_riccati(basis, coeffs, band, dt, n_steps, epsilon, d0=D0_DEFAULT, t0=0.0):
    """Feedback gains for ``n_steps`` semi-implicit steps on a band.

    One step reads ``X' = A X + G u + C X dW`` with ``A = D^-1 (I + dt K)``,
    ``G = dt D^-1 [B; 0]``, ``C = D^-1 C_cont`` and ``D = I + dt diag(mu, lam)``.
    Minimising ``E[sum_n dt u_n' B u_n + |X_N|^2 / epsilon]`` gives
    ``u_n = -L_n X_n``.  Returns gains ``(n_steps, k, 2k)`` and ``P_0``.
    """
    idx = _band_index(basis, band)
    k = idx.size
    d = 2 * k
    P = np.eye(d) / epsilon
    gains = np.empty((n_steps, k, d))
    const = coeffs.deterministic_constant
    mats = None
    for n in range(n_steps - 1, -1, -1):
        if mats is None or not const:
            Ac, Cc, Gc, Bbb = band_system(basis, coeffs, idx, d0, t=t0 + n * dt)
            K = Ac.copy()
            stiff_d = np.concatenate([basis.mu[idx], basis.lam[idx]])
            K[np.diag_indices(d)] += stiff_d
            Dinv = 1.0 / (1.0 + dt * stiff_d)
            Ad = Dinv[:, None] * (np.eye(d) + dt * K)
            Gd = dt * Dinv[:, None] * Gc
            Cd = Dinv[:, None] * Cc
            Rd = dt * Bbb
            mats = (Ad, Gd, Cd, Rd)
        Ad, Gd, Cd, Rd = mats
        PG = P @ Gd
        H = Rd + Gd.T @ PG
        L = np.linalg.solve(H, PG.T @ Ad)
        gains[n] = L
        P = Ad.T @ P @ Ad + dt * (Cd.T @ P @ Cd) - Ad.T @ PG @ L
        P = 0.5 * (P + P.T)
    return gains, P


# ---------------------------------------------------------------------------
# policies


@dataclass(frozen=True)
class PolicySegment:
    k0: int  # first global step index
    gains: np.ndarray  # (steps, k, 2k)
    band: np.ndarray  # mode indices
    B_rows: np.ndarray  # (k, n) mass-matrix rows of the band
    B_band: np.ndarray  # (k, k)

    @property
    def k1(self):
        return self.k0 + self.gains.shape[0]


class ControlPolicy:
    """Adapted feedback: on each controlled step ``u = -L_n X_band``, and
    ``h = chi_D0 sum u_i phi_i``.  Steps outside every segment are free."""

    def __init__(self, n_modes, segments=()):
        self.n_modes = n_modes
        self.segments = list(segments)

    def add(self, seg):
        self.segments.append(seg)

    def _segment(self, k):
        for s in self.segments:
            if s.k0 <= k < s.k1:
                return s
        return None

    def modal_control(self, k, x):
        s = self._segment(k)
        if s is None:
            return None, None
        n = self.n_modes
        xb = np.concatenate([x[:, s.band], x[:, n + s.band]], axis=1)
        u = -xb @ s.gains[k - s.k0].T
        return u, s

    def apply(self, k, t, x):
        u, s = self.modal_control(k, x)
        if u is None:
            return None, 0.0
        inj = u @ s.B_rows
        rate = np.einsum("pi,ij,pj->p", u, s.B_band, u)
        return inj, rate

    def control_field(self, k, x, xgrid, basis, d0=D0_DEFAULT):
        """``h`` on ``xgrid`` (zero outside D0) for states ``x`` at step ``k``."""
        u, s = self.modal_control(k, x)
        out = np.zeros((x.shape[0], len(xgrid)))
        if u is None:
            return out
        vals = u @ basis.phi(xgrid)[s.band]
        inside = (xgrid > d0[0]) & (xgrid < d0[1])
        return vals * inside


# ---------------------------------------------------------------------------
# one interval


@dataclass
class IntervalResult:
    j: int
    start_norm: float
    mid_norm: float
    mid_band_norm: float
    end_norm: float
    cost: float
    band_size: int
    epsilon: float
    state_end: np.ndarray = field(repr=False, default=None)
    ledger: np.ndarray = field(repr=False, default=None)


def _mean_sq(x, idx=None, n=None):
    if idx is None:
        return float(np.mean(np.sum(x**2, axis=1)))
    return float(np.mean(np.sum(x[:, idx] ** 2, axis=1) + np.sum(x[:, n + idx] ** 2, axis=1)))


def partial_spectral_control(basis, coeffs, x_start, paths, r, epsilon, d0=D0_DEFAULT, k0=0, policy=None):
    """Control the band ``mu_i <= r`` on the first half of ``paths``' window,
    free evolution on the second half.

    ``paths`` is the Brownian window of the interval (an even number of steps);
    ``k0`` the global index of its first step.  Returns
    ``(policy, end_state, IntervalResult)``; ``IntervalResult.ledger`` holds
    the per-step cost increments ``(paths, steps)``.
    """
    n = basis.n_modes
    idx = _band_index(basis, r)
    if idx.size == 0:
        raise ControlError(f"band r={r} holds no modes")
    if idx[-1] >= n:
        raise ControlError("band exceeds the retained modes")
    steps = paths.n_steps
    if steps % 2:
        raise ControlError("interval needs an even number of steps")
    x_start = np.broadcast_to(np.asarray(x_start, float), (paths.n_paths, 2 * n))
    half = steps // 2
    dt = float(np.diff(paths.times)[0])
    gains, _ = discrete_riccati(basis, coeffs, idx, dt, half, epsilon, d0, t0=paths.times[0])
    M = np.asarray(basis.mass_matrix(d0))
    seg = PolicySegment(k0, gains, idx, M[idx].copy(), M[np.ix_(idx, idx)].copy())
    policy = policy if policy is not None else ControlPolicy(n)
    policy.add(seg)
    first = paths.window(0, half)
    second = paths.window(half, steps)
    rec1 = simulate(basis, coeffs, x_start, first, policy=policy, record=False, t0_index=k0)
    x_mid = rec1.states[:, -1]
    rec2 = simulate(basis, coeffs, x_mid, second, record=False)
    x_end = rec2.states[:, -1]
    ledger = np.concatenate([rec1.cost, rec2.cost], axis=1)
    res = IntervalResult(
        j=0,
        start_norm=_mean_sq(x_start),
        mid_norm=_mean_sq(x_mid),
        mid_band_norm=_mean_sq(x_mid, idx, n),
        end_norm=_mean_sq(x_end),
        cost=math.fsum(ledger.ravel()) / ledger.shape[0],
        band_size=int(idx.size),
        epsilon=float(epsilon),
        state_end=x_end,
        ledger=ledger,
    )
    return policy, x_end, res


# ---------------------------------------------------------------------------
# dyadic synthesis


@dataclass
class LRReport:
    schedule: LRSchedule
    epsilon0: float
    beta0: float
    beta_doublings: int
    intervals: list
    initial_norm: float
    final_norm: float
    total_cost: float
    ledger_total: float
    contracting: bool
    n_paths: int
    dt: float
    policy: ControlPolicy = field(repr=False, default=None)
    final_state: np.ndarray = field(repr=False, default=None)
    deviation: str = (
        "band null control realised as epsilon-penalised LQ feedback "
        "(mean-square kill to tolerance, not almost-sure exact)"
    )

    @property
    def interval_norms(self):
        return [iv.end_norm for iv in self.intervals]

    @property
    def interval_costs(self):
        return [iv.cost for iv in self.intervals]

    def to_dict(self):
        return {
            "schedule": self.schedule.to_dict(),
            "epsilon0": self.epsilon0,
            "beta0": self.beta0,
            "beta_doublings": self.beta_doublings,
            "intervals": [
                {k: v for k, v in iv.__dict__.items() if k not in ("state_end", "ledger")}
                for iv in self.intervals
            ],
            "initial_norm": self.initial_norm,
            "final_norm": self.final_norm,
            "total_cost": self.total_cost,
            "contracting": self.contracting,
            "n_paths": self.n_paths,
            "dt": self.dt,
            "deviation": self.deviation,
        }


def _contracting(norms):
    # consecutive interval-end norms for j >= 2 must shrink
    tail = norms[1:]
    return all(b < a for a, b in zip(tail, tail[1:])) if len(tail) > 1 else True


def _synthesize_once(basis, coeffs, x0, schedule, eps0, paths, n_sub, d0):
    J = schedule.J
    T = schedule.T
    n_total = 2 ** (J + 1) * n_sub
    assert paths.n_steps == n_total
    dt = T / n_total
    x = np.broadcast_to(np.asarray(x0, float), (paths.n_paths, 2 * basis.n_modes)).copy()
    policy = ControlPolicy(basis.n_modes)
    results = []
    ledgers = []
    k = 0
    for iv in schedule.intervals:
        steps = 2 ** (J + 1 - iv.j) * n_sub
        eps = eps0 * 4.0 ** (-iv.j)
        window = paths.window(k, k + steps)
        if iv.band_size == 0:
            # band below the first eigenvalue: the whole interval is free decay
            start = _mean_sq(x)
            rec = simulate(basis, coeffs, x, window, record=False)
            x = rec.states[:, -1]
            res = IntervalResult(0, start, float("nan"), 0.0, _mean_sq(x), 0.0, 0, eps, ledger=rec.cost)
        else:
            policy, x, res = partial_spectral_control(basis, coeffs, x, window, iv.r, eps, d0, k0=k, policy=policy)
        res.j = iv.j
        ledgers.append(res.ledger)
        res.ledger = None
        res.state_end = None
        results.append(res)
        k += steps
    # free tail on [T_J, T]
    if k < n_total:
        rec = simulate(basis, coeffs, x, paths.window(k, n_total), record=False)
        x = rec.states[:, -1]
        ledgers.append(rec.cost)
    ledger = np.concatenate(ledgers, axis=1)
    return policy, x, results, ledger, dt


def lebeau_robbiano_synthesize(
    x0,
    T,
    beta=1.0,
    epsilon0=1e-6,
    n_paths=200,
    seed=0,
    coeffs=None,
    n_modes=16,
    n_sub=16,
    d0=D0_DEFAULT,
    adapt=True,
    max_doublings=6,
    basis=None,
):
    """Run the dyadic control-then-decay loop on an ensemble.

    ``x0`` is the stacked deterministic initial state ``(2 n_modes,)``.  The
    time grid is uniform with ``n_sub`` steps on the shortest half-interval,
    so all interval boundaries are grid points.  If consecutive interval norms
    do not contract (``j >= 2``) and ``adapt`` is set, ``beta`` doubles up to
    ``max_doublings`` times.
    """
    from .sde import SystemCoefficients

    coeffs = coeffs or SystemCoefficients()
    basis = basis or SpectralBasis(n_modes)
    x0 = np.asarray(x0, float)
    init = float(np.sum(x0**2))
    b = float(beta)
    for doubling in range(max_doublings + 1):
        sched = lr_schedule(T, b, basis.n_modes)
        n_total = 2 ** (sched.J + 1) * n_sub
        paths = brownian_batch(uniform_times(T, n_total), n_paths, seed)
        policy, x, results, ledger, dt = _synthesize_once(basis, coeffs, x0, sched, epsilon0, paths, n_sub, d0)
        norms = [r.end_norm for r in results]
        ok = _contracting(norms)
        total = math.fsum(ledger.ravel()) / n_paths
        report = LRReport(
            schedule=sched,
            epsilon0=epsilon0,
            beta0=float(beta),
            beta_doublings=doubling,
            intervals=results,
            initial_norm=init,
            final_norm=_mean_sq(x),
            total_cost=total,
            ledger_total=total,
            contracting=ok,
            n_paths=n_paths,
            dt=dt,
            policy=policy,
            final_state=x,
        )
        report.ledger = ledger
        if ok or not adapt:
            return report
        log.info("interval norms not contracting at beta=%g; doubling", b)
        b *= 2.0
    raise SynthesisFailure("interval norms do not contract after beta doublings", report)


# ---------------------------------------------------------------------------
# cost calibration


@dataclass(frozen=True)
class CostCurve:
    T: np.ndarray
    cost: np.ndarray
    C_hat: float
    intercept: float
    r2: float
    failures: tuple = ()

    def to_dict(self):
        return {
            "T": list(map(float, self.T)),
            "cost": list(map(float, self.cost)),
            "C_hat": self.C_hat,
            "intercept": self.intercept,
            "r2": self.r2,
            "failures": list(self.failures),
        }


def fit_exponential_blowup(Ts, costs):
    """Least squares ``log cost = C/T + c``; returns ``(C, c, R^2)``."""
    X = 1.0 / np.asarray(Ts, float)
    Y = np.log(np.asarray(costs, float))
    A = np.vstack([X, np.ones_like(X)]).T
    (C, c), *_ = np.linalg.lstsq(A, Y, rcond=None)
    resid = Y - A @ np.array([C, c])
    ss_tot = float(np.sum((Y - Y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(C), float(c), r2


BETA0_DEFAULT = math.pi**2 / 4
EPSILON0_COST = 1e-12


def cost_curve(Ts, x0, beta0=BETA0_DEFAULT, **kwargs):
    """Total LR cost for each horizon with ``beta = beta0 / T^2``, so the band
    frequencies scale like ``1/tau_j``; fits ``cost ~ exp(C/T)``.

    The small default terminal penalty makes every band kill complete, so the
    cost measures exact band null control rather than a saturated penalty.
    """
    Ts = sorted(float(t) for t in Ts)
    if len(Ts) < 3:
        raise ValueError("need at least three horizons")
    kwargs.setdefault("adapt", False)
    kwargs.setdefault("epsilon0", EPSILON0_COST)
    got_T, got_c, fails = [], [], []
    for T in Ts:
        try:
            rep = lebeau_robbiano_synthesize(x0, T, beta=beta0 / T**2, **kwargs)
        except ControlError as e:
            fails.append(f"T={T}: {e}")
            continue
        got_T.append(T)
        got_c.append(rep.total_cost)
    if len(got_T) < 2:
        return CostCurve(np.array(got_T), np.array(got_c), float("nan"), float("nan"), float("nan"), tuple(fails))
    C, c, r2 = fit_exponential_blowup(got_T, got_c)
    return CostCurve(np.array(got_T), np.array(got_c), C, c, r2, tuple(fails))
