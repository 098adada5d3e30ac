"""Observability and duality probes.

* spectral inequality on a sine band (exact via the D0 mass matrix),
* band observability constant of the adjoint of the band system,
* a clamped finite-difference reduction of the forward adjoint system

      du + (g u_xxxx + u_xxx + u_xx) dt = v_x dt + d1 u dW
      dv - G v_xx dt = (v_x + u_x) dt + (d2 u + d3 v) dW

  with ``u = u_x = 0`` and ``v = 0`` at both ends, its observability
  Gramians, and the duality-based control of the backward system,
* Carleman functionals of a modal trajectory, in log form.

With deterministic coefficients and deterministic terminal data the backward
system admits solutions with vanishing martingale parts, so it reduces to a
backward matrix ODE; every probe here uses that reduction.
"""

import math
from dataclasses import dataclass

import mpmath
import numpy as np
from scipy.linalg import eigh, expm, lu_factor, lu_solve
from scipy.optimize import brentq, minimize
from scipy.special import logsumexp

from .basis import SpectralBasis
from .weights import carleman_eval


class UnobservableBandError(RuntimeError):
    pass


class SteppingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# spectral inequality


def _mp_restricted_mass(n, a, b):
    a = mpmath.mpf(a)
    b = mpmath.mpf(b)
    pi = mpmath.pi

    def ci(k):
        if k == 0:
            return b - a
        kk = k * pi
        return (mpmath.sin(kk * b) - mpmath.sin(kk * a)) / kk

    return mpmath.matrix([[ci(i - j) - ci(i + j) for j in range(1, n + 1)] for i in range(1, n + 1)])


def band_ratio(k, d0, dps=60):
    """``max |z|^2 / |z|^2_{L^2(D0)}`` over ``span(phi_1..phi_k)``: the inverse
    of the smallest eigenvalue of the D0 mass matrix, in high precision."""
    if k < 1:
        raise ValueError("band is empty")
    with mpmath.workdps(dps):
        B = _mp_restricted_mass(k, *d0)
        ev = mpmath.eigsy(B, eigvals_only=True)
        lo = min(ev)
        return float(1 / lo)


@dataclass(frozen=True)
class SpectralInequalityReport:
    r: np.ndarray
    band_sizes: np.ndarray
    ratios: np.ndarray
    C_slope: float
    C_intercept: float
    sampled_max: np.ndarray

    def to_rows(self):
        return [
            {"r": float(r), "band_size": int(k), "ratio": float(q), "sampled_max": float(s)}
            for r, k, q, s in zip(self.r, self.band_sizes, self.ratios, self.sampled_max)
        ]


def spectral_inequality_probe(r_values, d0=(0.3, 0.7), samples=0, seed=0, dps=60):
    """Band-max ratio for each cutoff ``r``; fit ``log ratio = C r^(1/4) + c``.

    ``samples > 0`` also records the best ratio over random band elements
    (a lower bound for the exact value).
    """
    r_values = np.asarray(r_values, dtype=float)
    nmax = int(np.floor(np.max(r_values) ** 0.25 / np.pi + 1e-9)) if r_values.size else 0
    if nmax < 1:
        raise ValueError("band is empty: r must be at least mu_1 = pi^4")
    basis = SpectralBasis(nmax)
    sizes = np.array([basis.band_size(r) for r in r_values])
    if np.any(sizes == 0):
        raise ValueError("band is empty: r must be at least mu_1 = pi^4")
    ratios = np.array([band_ratio(int(k), d0, dps) for k in sizes])
    rng = np.random.default_rng(seed)
    sampled = np.full(len(sizes), np.nan)
    if samples:
        M = np.asarray(basis.mass_matrix(d0))
        for i, k in enumerate(sizes):
            c = rng.standard_normal((samples, k))
            num = np.sum(c**2, axis=1)
            den = np.einsum("pi,ij,pj->p", c, M[:k, :k], c)
            sampled[i] = float(np.max(num / den))
    if len(r_values) >= 2:
        A = np.vstack([r_values**0.25, np.ones_like(r_values)]).T
        (C, c), *_ = np.linalg.lstsq(A, np.log(ratios), rcond=None)
    else:
        C, c = float("nan"), float("nan")
    return SpectralInequalityReport(r_values, sizes, ratios, float(C), float(c), sampled)


def mode_one_closed_form(d0):
    """``1 / int_D0 2 sin^2(pi x) dx``."""
    a, b = d0
    F = lambda x: x - math.sin(2 * math.pi * x) / (2 * math.pi)
    return 1.0 / (F(b) - F(a))


# ---------------------------------------------------------------------------
# band observability


def _mode_blocks(basis, idx, coeffs):
    """Adjoint drift per mode in reversed time: ``d/ds (u_i, v_i) = A_i (u_i, v_i)``."""
    a1, a2, a3, a4 = coeffs.drift(0.0)
    for i in idx:
        yield np.array([[-basis.mu[i] + a1, a3], [a2, -basis.lam[i] + a4]])


def _exp_terms(basis, idx, coeffs):
    """``u(s) = sum_e E[e] exp(kappa[e] s) xi`` with ``xi = (u_tau, v_tau)``
    (band-stacked).  Returns (kappa (2k,), U (2k, k, 2k), V (2k, k, 2k))."""
    k = len(idx)
    kap = []
    U = np.zeros((2 * k, k, 2 * k))
    V = np.zeros((2 * k, k, 2 * k))
    for m, A in enumerate(_mode_blocks(basis, idx, coeffs)):
        w, R = np.linalg.eig(A)
        if np.iscomplexobj(w) and np.max(np.abs(w.imag)) > 0:
            raise UnobservableBandError("complex adjoint modes are not supported")
        w = w.real
        R = R.real
        Rinv = np.linalg.inv(R)
        for e in range(2):
            P = np.outer(R[:, e], Rinv[e])  # spectral projector
            row = 2 * m + e
            kap.append(w[e])
            U[row, m, m] = P[0, 0]
            U[row, m, k + m] = P[0, 1]
            V[row, m, m] = P[1, 0]
            V[row, m, k + m] = P[1, 1]
    return np.array(kap), U, V


def _int_exp(k, tau):
    # int_0^tau exp(k s) ds, stable for k of either sign
    k = np.asarray(k, dtype=float)
    out = np.empty_like(k)
    small = np.abs(k * tau) < 1e-8
    out[small] = tau * (1 + 0.5 * k[small] * tau)
    ks = k[~small]
    out[~small] = np.expm1(ks * tau) / ks
    return out


@dataclass(frozen=True)
class GramianPair:
    G_obs: np.ndarray
    G_T: np.ndarray

    def constant(self):
        G_obs = 0.5 * (self.G_obs + self.G_obs.T)
        G_T = 0.5 * (self.G_T + self.G_T.T)
        if np.min(np.linalg.eigvalsh(G_obs)) <= 0:
            raise UnobservableBandError("observation Gramian is singular")
        return float(eigh(G_T, G_obs, eigvals_only=True)[-1])


def band_gramians(basis, r, tau, coeffs, d0=(0.3, 0.7)):
    """Closed-form Gramians of the band adjoint from terminal data ``xi``:
    ``xi' G_obs xi = int_0^tau int_D0 |u|^2`` and ``xi' G_T xi = |u(0)|^2 + |v(0)|^2``
    (``u(0)`` being the value after ``tau`` units of backward time)."""
    idx = np.flatnonzero(basis.band(r)) if np.isscalar(r) else np.asarray(r)
    if len(idx) == 0:
        raise ValueError("band is empty")
    kap, U, V = _exp_terms(basis, idx, coeffs)
    B = np.asarray(basis.mass_matrix(d0))[np.ix_(idx, idx)]
    Iexp = _int_exp(kap[:, None] + kap[None, :], tau)
    G_obs = np.einsum("eab,ac,fcd,ef->bd", U, B, U, Iexp, optimize=True)
    ex = np.exp(kap * tau)
    uT = np.einsum("e,eab->ab", ex, U)
    vT = np.einsum("e,eab->ab", ex, V)
    G_T = uT.T @ uT + vT.T @ vT
    G_obs = 0.5 * (G_obs + G_obs.T)
    G_T = 0.5 * (G_T + G_T.T)
    return GramianPair(G_obs, G_T)


def band_observability_constant(r, tau, coeffs, d0=(0.3, 0.7), n_modes=None):
    """Largest generalised eigenvalue of ``(G_T, G_obs)`` for the band ``mu_i <= r``."""
    n = n_modes or max(1, int(np.floor(r**0.25 / np.pi + 1e-9)))
    basis = SpectralBasis(n)
    return band_gramians(basis, r, tau, coeffs, d0).constant()


def band_observability_bruteforce(r, tau, coeffs, d0=(0.3, 0.7), samples=1000, seed=0, n_grid=4001, polish=True):
    """Independent estimate: propagate the band adjoint with matrix exponentials
    on a time grid, integrate the observation by Simpson, maximise the ratio
    over random terminal data, then polish the best sample locally."""
    from scipy.integrate import simpson

    n = max(1, int(np.floor(r**0.25 / np.pi + 1e-9)))
    basis = SpectralBasis(n)
    idx = np.flatnonzero(basis.band(r))
    k = len(idx)
    a1, a2, a3, a4 = coeffs.drift(0.0)
    I = np.eye(k)
    A = np.block([
        [np.diag(-basis.mu[idx]) + a1 * I, a3 * I],
        [a2 * I, np.diag(-basis.lam[idx]) + a4 * I],
    ])
    s = np.linspace(0.0, tau, n_grid)
    step = expm(A * (s[1] - s[0]))
    B = np.asarray(basis.mass_matrix(d0))[np.ix_(idx, idx)]

    # propagator powers on the grid; the Simpson-integrated observation and
    # the terminal energy are then quadratic forms in the terminal datum
    P = np.empty((n_grid, 2 * k, 2 * k))
    P[0] = np.eye(2 * k)
    for j in range(1, n_grid):
        P[j] = step @ P[j - 1]
    Pu = P[:, :k]
    M_obs = simpson(np.einsum("tai,ab,tbj->tij", Pu, B, Pu, optimize=True), x=s, axis=0)
    M_T = P[-1].T @ P[-1]

    def ratio(xi):
        return float((xi @ M_T @ xi) / (xi @ M_obs @ xi))

    rng = np.random.default_rng(seed)
    xs = rng.standard_normal((samples, 2 * k))
    vals = np.einsum("pa,ab,pb->p", xs, M_T, xs) / np.einsum("pa,ab,pb->p", xs, M_obs, xs)
    best = int(np.argmax(vals))
    best_val = float(vals[best])
    if polish:
        res = minimize(lambda x: -ratio(x / np.linalg.norm(x)), xs[best], method="Nelder-Mead",
                       options={"maxiter": 4000, "xatol": 1e-10, "fatol": 1e-12})
        best_val = max(best_val, -float(res.fun))
    return best_val, float(vals[best])


# ---------------------------------------------------------------------------
# clamped finite differences


def clamped_ground_eigenvalue():
    """``k^4`` for the first positive root of ``cosh k cos k = 1``."""
    k = brentq(lambda k: math.cosh(k) * math.cos(k) - 1.0, 4.0, 5.0, xtol=1e-15)
    return k**4, k


class ClampedDiscretization:
    """Second-order differences on ``n_points`` interior nodes of (0, 1).

    ``D4`` eliminates the ghost node by ``y_x = 0`` (``y_{-1} = y_1``);
    ``D2`` is ``-d^2/dx^2`` with Dirichlet ends, ``D1``, ``D3`` centred.
    """

    def __init__(self, n_points):
        n = int(n_points)
        if n < 5:
            raise ValueError("need at least 5 interior points")
        self.n_points = n
        self.h = 1.0 / (n + 1)
        self.x = np.arange(1, n + 1) * self.h
        h = self.h
        D4 = np.zeros((n, n))
        for i in range(n):
            for off, c in ((-2, 1), (-1, -4), (0, 6), (1, -4), (2, 1)):
                j = i + off
                if 0 <= j < n:
                    D4[i, j] += c
        D4[0, 0] += 1  # ghost y_{-1} = y_1
        D4[-1, -1] += 1
        self.D4 = D4 / h**4
        self.D2 = (2 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1)) / h**2
        self.D1 = (np.eye(n, k=1) - np.eye(n, k=-1)) / (2 * h)
        D3 = np.zeros((n, n))
        for i in range(n):
            for off, c in ((-2, -1), (-1, 2), (1, -2), (2, 1)):
                j = i + off
                if 0 <= j < n:
                    D3[i, j] += c
        # ghosts: y_{-1} = y_1 enters row 0 with -1; y_{n+2} = y_n enters row n-1 with +1
        D3[0, 0] += -1
        D3[-1, -1] += 1
        self.D3 = D3 / (2 * h**3)

    def observation_mask(self, d0):
        return ((self.x > d0[0]) & (self.x < d0[1])).astype(float)

    def adjoint_drift(self, gamma=1.0, Gamma=1.0):
        """Matrix ``K`` with ``dw = K w dt + ...`` for ``w = (u, v)``."""
        Kuu = -gamma * self.D4 - self.D3 + self.D2
        Kuv = self.D1
        Kvu = self.D1
        Kvv = -Gamma * self.D2 + self.D1
        return np.block([[Kuu, Kuv], [Kvu, Kvv]])

    def noise(self, d):
        d1, d2, d3 = d
        n = self.n_points
        Z = np.zeros((n, n))
        I = np.eye(n)
        return np.block([[d1 * I, Z], [d2 * I, d3 * I]])


@dataclass
class ClampedProbe:
    n_points: int
    T: float
    dt: float
    d0: tuple
    exact_constant: float
    mc_estimate: float
    mc_ci: float
    data_ratios_exact: np.ndarray
    data_ratios_mc: np.ndarray
    n_paths: int

    def to_dict(self):
        return {
            "n_points": self.n_points,
            "T": self.T,
            "dt": self.dt,
            "d0": list(self.d0),
            "exact_constant": self.exact_constant,
            "mc_estimate": self.mc_estimate,
            "mc_ci": self.mc_ci,
            "n_paths": self.n_paths,
        }


class _AdjointStepper:
    """Implicit Euler for the drift, explicit noise: ``w' = A (w + C w dW)``."""

    def __init__(self, disc, dt, d, gamma=1.0, Gamma=1.0):
        K = disc.adjoint_drift(gamma, Gamma)
        m = K.shape[0]
        self.K = K
        self.lu = lu_factor(np.eye(m) - dt * K)
        self.C = disc.noise(d)
        self.dt = dt
        self.m = m

    def step(self, W, dW=None):
        rhs = W if dW is None else W + (self.C @ W) * dW
        return lu_solve(self.lu, rhs)

    def A(self):
        return lu_solve(self.lu, np.eye(self.m))


def _second_moment_forms(st, n_steps, O):
    """Quadratic forms ``(Q_T, Q_obs)`` on ``w0`` for ``E|w_N|^2_h`` and
    ``E sum dt w_{n+1}' O w_{n+1}`` (backward value recursion)."""
    A = st.A()
    AC = A @ st.C
    m = st.m
    QT = np.eye(m)
    Qo = np.zeros((m, m))
    for _ in range(n_steps):
        QT = A.T @ QT @ A + st.dt * AC.T @ QT @ AC
        Z = Qo + st.dt * O
        Qo = A.T @ Z @ A + st.dt * AC.T @ Z @ AC
    return 0.5 * (QT + QT.T), 0.5 * (Qo + Qo.T)


def _resolved_max_ratio(QT, Qo, rel=1e-11):
    """``max w'QT w / w'Qo w`` on the numerically resolved range of ``Qo``.

    Grid-scale data are damped by many orders of magnitude in both forms;
    below ``rel * max eig(Qo)`` rounding dominates, and there the terminal
    form is smaller still, so those directions are dropped.
    """
    w, V = np.linalg.eigh(Qo)
    if w[-1] <= 0:
        raise UnobservableBandError("observed-energy form vanishes")
    if w[0] < -1e-8 * w[-1]:
        raise UnobservableBandError("observed-energy form is not positive semidefinite")
    keep = w > rel * w[-1]
    S = V[:, keep] / np.sqrt(w[keep])
    M = S.T @ QT @ S
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[-1])


def smooth_initial_family(disc, n_data, seed, n_active=4):
    """Random smooth adjoint data: sine combinations of the first modes,
    sampled at the nodes; same coefficients at every resolution."""
    rng = np.random.default_rng(seed)
    c = rng.standard_normal((n_data, 2, n_active))
    S = np.sqrt(2) * np.sin(np.pi * np.outer(np.arange(1, n_active + 1), disc.x))
    # u needs u_x = 0 at the ends: multiply by a sin envelope
    env = np.sin(np.pi * disc.x)
    u = (c[:, 0] @ S) * env
    v = c[:, 1] @ S
    return np.concatenate([u, v], axis=1)


def clamped_observability_probe(n_points=64, d=(0.0, 0.0, 0.0), T=0.1, dt=None, d0=(0.3, 0.7),
                                n_paths=200, n_data=8, seed=0, gamma=1.0, Gamma=1.0):
    """Observability constant of the clamped adjoint system.

    ``exact_constant``: largest generalised eigenvalue of the exact
    second-moment forms (terminal energy vs observed energy).  ``mc_estimate``:
    max over a random smooth data family of the Monte Carlo ratio
    ``E|w(T)|^2 / E int int_D0 |u|^2``, with a normal-theory CI on the
    maximising datum.  The node weight ``h`` cancels in every ratio.
    """
    disc = ClampedDiscretization(n_points)
    dt = T / 200 if dt is None else dt
    n_steps = int(round(T / dt))
    if n_steps < 1:
        raise ValueError("dt exceeds T")
    st = _AdjointStepper(disc, dt, d, gamma, Gamma)
    n = disc.n_points
    mask = disc.observation_mask(d0)
    O = np.diag(np.concatenate([mask, np.zeros(n)]))
    QT, Qo = _second_moment_forms(st, n_steps, O)
    exact = _resolved_max_ratio(QT, Qo)

    W0 = smooth_initial_family(disc, n_data, seed + 1)
    ratios_exact = np.einsum("pa,ab,pb->p", W0, QT, W0) / np.einsum("pa,ab,pb->p", W0, Qo, W0)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    ratios_mc = np.empty(n_data)
    ci = 0.0
    for i in range(n_data):
        W = np.repeat(W0[i][:, None], n_paths, axis=1)
        obs = np.zeros(n_paths)
        for _ in range(n_steps):
            dW = rng.standard_normal(n_paths) * math.sqrt(dt)
            W = st.step(W, dW[None, :])
            if not np.all(np.isfinite(W)):
                raise SteppingError("adjoint ensemble diverged; use implicit stepping with a smaller dt")
            obs += dt * np.sum(mask[:, None] * W[:n] ** 2, axis=0)
        term = np.sum(W**2, axis=0)
        ratios_mc[i] = term.mean() / obs.mean()
        if ratios_mc[i] >= ratios_mc[: i + 1].max():
            # delta method on the ratio of means
            cov = np.cov(np.vstack([term, obs]))
            g = np.array([1 / obs.mean(), -term.mean() / obs.mean() ** 2])
            ci = 1.96 * math.sqrt(max(g @ cov @ g, 0.0) / n_paths)
    return ClampedProbe(n_points, T, dt, tuple(d0), exact, float(ratios_mc.max()), ci,
                        ratios_exact, ratios_mc, n_paths)


# ---------------------------------------------------------------------------
# duality control of the backward system


@dataclass
class DualityControl:
    h: np.ndarray  # (n_steps, n_points) control on the nodes (zero off D0)
    x0: np.ndarray  # backward solution at t = 0
    duality_residual: float
    x0_residual: float
    alpha: float
    gramian_condition: float
    w0: np.ndarray
    times: np.ndarray
    observability_constant: float
    residual_bound: float

    def to_dict(self):
        return {
            "duality_residual": self.duality_residual,
            "observability_constant": self.observability_constant,
            "residual_bound": self.residual_bound,
            "x0_residual": self.x0_residual,
            "alpha": self.alpha,
            "gramian_condition": self.gramian_condition,
        }


def duality_control_backward(yT, zT, n_points=32, T=0.1, dt=None, d0=(0.3, 0.7), alpha=None,
                             gamma=1.0, Gamma=1.0, test_data=None, seed=0):
    """Least-norm control for the discretised backward system, by duality.

    Backward system (reduced): ``x' = -K^T x + B h`` with ``K`` the adjoint
    drift, stepped backward by implicit Euler
    ``(I - dt K^T) x_n = x_{n+1} - dt B h_n``; the adjoint mean is stepped
    forward by ``w_{n+1} = (I - dt K)^{-1} w_n``, which makes the discrete
    duality identity exact.  The control is ``h_n = B' w*_{n+1}`` with
    ``(G + alpha I) w* = Phi_T' x_T`` (``alpha = 0`` when ``G`` is well
    conditioned, else 1e-10 unless given).  Pairings carry the node weight
    ``h``, so ``x0 = alpha w*`` and ``|x0| <= sqrt(alpha C) |x_T| / 2``.
    """
    disc = ClampedDiscretization(n_points)
    dt = T / 200 if dt is None else dt
    N = int(round(T / dt))
    n = disc.n_points
    m = 2 * n
    xT = np.concatenate([np.asarray(yT, float), np.asarray(zT, float)])
    if xT.shape != (m,):
        raise ValueError(f"terminal data must have {n} nodal values per component")
    K = disc.adjoint_drift(gamma, Gamma)
    lu_f = lu_factor(np.eye(m) - dt * K)
    lu_b = lu_factor(np.eye(m) - dt * K.T)
    mask = disc.observation_mask(d0)
    Bm = np.zeros((m, n))
    Bm[:n][np.diag_indices(n)] = mask  # B h puts h (on D0) into the y equation
    hx = disc.h
    # propagators Phi_n = ((I - dt K)^{-1})^n; forms in the h-weighted pairing
    Phi = np.eye(m)
    G = np.zeros((m, m))
    Phis = []
    for _ in range(N):
        Phi = lu_solve(lu_f, Phi)
        Phis.append(Phi)
        O = Bm.T @ Phi
        G += dt * O.T @ O
    G = 0.5 * (G + G.T)
    b = Phi.T @ xT
    ev = np.linalg.eigvalsh(G)
    cond = float(ev[-1] / max(ev[0], 1e-300))
    if alpha is None:
        alpha = 0.0 if cond < 1e10 else 1e-10
    alpha = float(alpha)
    if not np.any(xT):
        w0 = np.zeros(m)
    else:
        w0 = np.linalg.solve(G + alpha * np.eye(m), b)
    h = np.array([Bm.T @ (P @ w0) for P in Phis])  # h_n pairs with w_{n+1}
    # backward solve
    x = xT.copy()
    for k in range(N - 1, -1, -1):
        x = lu_solve(lu_b, x - dt * Bm @ h[k])
    x0 = x
    # duality identity for arbitrary adjoint data
    rng = np.random.default_rng(seed)
    W0 = rng.standard_normal((m, 4)) if test_data is None else np.atleast_2d(test_data).T
    lhs = hx * (xT @ (Phis[-1] @ W0) - x0 @ W0)
    rhs = np.zeros(W0.shape[1])
    for k in range(N):
        rhs += dt * hx * h[k] @ (Bm.T @ (Phis[k] @ W0))
    scale = max(np.max(np.abs(lhs)), np.max(np.abs(rhs)), 1e-300)
    dual = float(np.max(np.abs(lhs - rhs)) / scale) if np.any(xT) else float(np.max(np.abs(lhs - rhs)))
    res = float(np.sqrt(hx) * np.linalg.norm(x0))
    # Tikhonov bound |x0| <= sqrt(alpha C) |x_T| / 2, C the deterministic
    # observability constant of the same discretisation
    C = _resolved_max_ratio(Phi.T @ Phi, G)
    bound = 0.5 * math.sqrt(alpha * C) * math.sqrt(hx) * float(np.linalg.norm(xT))
    return DualityControl(h, x0, dual, res, alpha, cond, w0, np.linspace(0, T, N + 1), C, bound)


# ---------------------------------------------------------------------------
# Carleman functionals


@dataclass(frozen=True)
class CarlemanFunctionals:
    I_KS: float
    I_H: float
    log_I_KS: float
    log_I_H: float
    terms_KS: tuple  # log of each term
    terms_H: tuple


def _trap_weights(x):
    w = np.zeros_like(x)
    d = np.diff(x)
    w[:-1] += d / 2
    w[1:] += d / 2
    return w


def carleman_functionals(basis, times, p_coeffs, q_coeffs, cp, n_x=401, frozen_lambda=None):
    """Log-space quadrature of ``I_KS(p)`` and ``I_H(q)`` for modal trajectories.

    ``p_coeffs``, ``q_coeffs``: ``(len(times), n_modes)`` sine coefficients.
    Spatial derivatives are spectral; time/space integrals trapezoidal; times
    at 0 or T contribute zero.  ``frozen_lambda`` evaluates ``theta`` with that
    lambda while the explicit ``lambda`` powers use ``cp.lam``.
    """
    x = np.linspace(0.0, 1.0, n_x)
    times = np.asarray(times, float)
    lam = cp.lam
    cp_theta = cp if frozen_lambda is None else cp.with_lambda(frozen_lambda)
    X, Tt = np.meshgrid(x, times)
    vals = carleman_eval(cp_theta, X, Tt)
    phi = np.where(vals.singular, 1.0, vals.phi)  # phi does not depend on lambda
    log_base = 2 * vals.log_theta + np.log(lam) + np.log(phi)
    logw = np.log(np.outer(_trap_weights(times), _trap_weights(x)) + 1e-300)
    logw = np.where(vals.singular, -np.inf, logw)

    def field(c, order):
        return np.asarray(c, float) @ (basis.phi(x) if order == 0 else basis.dphi(x, order))

    def term(vals_sq, power):
        with np.errstate(divide="ignore"):
            lv = np.log(vals_sq) + power * (np.log(lam) + np.log(phi))
        return float(logsumexp(np.where(np.isfinite(lv), log_base + lv + logw, -np.inf)))

    p = {o: field(p_coeffs, o) ** 2 for o in (0, 1, 2, 3)}
    q = {o: field(q_coeffs, o) ** 2 for o in (0, 1)}
    tks = (term(p[3], 0), term(p[2], 2), term(p[1], 4), term(p[0], 6))
    th = (term(q[1], 0), term(q[0], 2))
    lks = float(logsumexp(tks))
    lh = float(logsumexp(th))
    ex = lambda v: math.exp(v) if v < 700 else math.inf
    return CarlemanFunctionals(ex(lks), ex(lh), lks, lh, tks, th)
