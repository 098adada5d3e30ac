"""Source-term method: control of

    dy + (y_xxxx + F) dt = (chi_D0 h + a1 y + a2 z) dt + (b1 y + b2 z) dW
    dz - z_xx dt = (a3 y + a4 z) dt + b3 z dW

on the geometric grid ``T_k = T - T/Q^k``.  On block ``[T_k, T_{k+1}]`` the
state splits as ``y1 + y2``: ``y1`` starts from zero and carries the source,
``y2`` starts from the inherited data and is steered to zero by a full-band
penalised LQ feedback.  The next block inherits ``y1(T_{k+1}) + y2(T_{k+1})``,
so the glued trajectory solves the controlled system exactly (linearity);
the ``y2`` remainder is the kill tolerance.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .control import D0_DEFAULT, ControlPolicy, PolicySegment, discrete_riccati
from .sde import XtAccumulator, brownian_batch, simulate
from .weights import log_gamma, log_rho0, log_rho, source_grid


class SourceTermError(RuntimeError):
    def __init__(self, msg, block=None):
        super().__init__(msg if block is None else f"block {block}: {msg}")
        self.block = block


@dataclass
class SourceBlock:
    k: int
    start: float
    end: float
    data_norm: float  # E(|a_k|^2 + |b_k|^2)
    cost: float
    cost_bound: float
    end_y2_norm: float  # E|y2(T_{k+1})|^2, the kill residual
    epsilon: float


def truncation_index(p, rel_tol=1e-12, k_max=200):
    """First ``K`` with ``rho0(T_K) / rho0(0) < rel_tol``."""
    g = source_grid(p, k_max)
    l0 = log_rho0(p, 0.0)
    for k in range(k_max + 1):
        if log_rho0(p, g.times[k]) - l0 < math.log(rel_tol):
            return k
    raise SourceTermError("rho0 never fell below the tolerance")


def block_times(p, K, steps_per_block=400, tail_steps=200):
    """Time grid: ``steps_per_block`` uniform steps on each block ``k < K``,
    then ``tail_steps`` on ``[T_K, T]``.  Returns ``(times, block_starts)``
    with ``block_starts`` the grid indices of ``T_0 .. T_K``."""
    g = source_grid(p, K)
    pieces = []
    starts = [0]
    for k in range(K):
        pts = np.linspace(g.times[k], g.times[k + 1], steps_per_block + 1)
        pieces.append(pts[:-1] if k < K - 1 or tail_steps else pts)
        starts.append(starts[-1] + steps_per_block)
    if tail_steps:
        pieces.append(np.linspace(g.times[K], p.T, tail_steps + 1))
    times = np.concatenate(pieces)
    return times, np.array(starts)


def rho_scaled_mode_source(p, mode=1, scale=1.0):
    """Built-in source ``F(t) = scale * rho(t) * phi_mode`` as a callable for
    :func:`simulate`; vanishes at ``t = T``."""

    def F(n_modes, times):
        out = np.zeros((1, len(times) - 1, n_modes))
        out[0, :, mode - 1] = scale * np.exp(log_rho(p, times[:-1]))
        return out

    return F


@dataclass
class SourceTermResult:
    times: np.ndarray
    states: np.ndarray  # glued (paths, nt, 2n)
    injections: np.ndarray  # modal chi_D0 h per step (paths, steps, n)
    cost: np.ndarray  # per-step ledger (paths, steps)
    source: np.ndarray  # (paths or 1, steps, n)
    blocks: list
    K: int
    block_starts: np.ndarray
    weighted: dict
    n_modes: int
    final_norm: float
    data_norm: float
    paths: object = field(repr=False, default=None)

    def to_dict(self):
        return {
            "K": self.K,
            "blocks": [b.__dict__ for b in self.blocks],
            "weighted": self.weighted,
            "final_norm": self.final_norm,
            "data_norm": self.data_norm,
            "n_steps": int(self.times.size - 1),
        }


def _expand_source(F, basis, times, n_paths):
    n = basis.n_modes
    steps = times.size - 1
    if F is None:
        return np.zeros((1, steps, n))
    if callable(F):
        F = F(n, times)
    F = np.asarray(F, dtype=float)
    if F.ndim != 3 or F.shape[1:] != (steps, n) or F.shape[0] not in (1, n_paths):
        raise SourceTermError(f"source must have shape (1 or paths, {steps}, {n}), got {F.shape}")
    if not np.all(np.isfinite(F)):
        raise SourceTermError("source has non-finite values")
    return F


def _weighted_source_norm(F, times, p):
    """``E int |F/rho|^2 dt`` by left-point quadrature (F is left-point data)."""
    dts = np.diff(times)
    lr = log_rho(p, times[:-1])
    sq = np.sum(F**2, axis=2)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        vals = np.where(sq > 0, np.exp(np.log(sq) - 2 * lr[None, :]), 0.0)
    return float(np.mean(np.sum(vals * dts[None, :], axis=1)))


def source_term_control(
    basis,
    coeffs,
    x0,
    p,
    paths,
    F=None,
    K=None,
    block_starts=None,
    epsilon0=1e-14,
    eps_ratio=0.25,
    d0=D0_DEFAULT,
    rel_tol=1e-12,
):
    """Run the block construction on every path of ``paths``.

    ``paths`` must live on the grid from :func:`block_times` (pass its
    ``block_starts``).  ``F``: ``None``, an array ``(1 or paths, steps, n)``
    or a builder ``(n_modes, times) -> array``.  Block ``k`` uses the kill
    penalty ``epsilon0 * eps_ratio**k``.
    """
    n = basis.n_modes
    P = paths.n_paths
    times = paths.times
    if K is None:
        K = truncation_index(p, rel_tol)
    if block_starts is None or len(block_starts) != K + 1:
        raise SourceTermError("block_starts must list the grid index of every T_k, k = 0..K")
    Fa = _expand_source(F, basis, times, P)
    if _weighted_source_norm(Fa, times, p) == math.inf:
        raise SourceTermError("source is not square integrable against rho")
    x0 = np.broadcast_to(np.asarray(x0, float), (P, 2 * n)).copy()
    steps = paths.n_steps
    states = np.empty((P, steps + 1, 2 * n))
    injections = np.zeros((P, steps, n))
    cost = np.zeros((P, steps))
    states[:, 0] = x0
    M = np.asarray(basis.mass_matrix(d0))
    full = np.arange(n)
    blocks = []
    data = x0
    for k in range(K):
        k0, k1 = int(block_starts[k]), int(block_starts[k + 1])
        win = paths.window(k0, k1)
        dt = float(times[k0 + 1] - times[k0])
        Fk = Fa[:, k0:k1]
        # y1: zero data, source, no control
        r1 = simulate(basis, coeffs, np.zeros(2 * n), win, source=Fk if Fk.shape[0] == P else np.broadcast_to(Fk, (P,) + Fk.shape[1:]))
        # y2: inherited data, full-band kill, no source
        eps = epsilon0 * eps_ratio**k
        try:
            gains, _ = discrete_riccati(basis, coeffs, full, dt, k1 - k0, eps, d0, t0=times[k0])
        except np.linalg.LinAlgError as e:
            raise SourceTermError(f"control synthesis failed: {e}", k) from e
        policy = ControlPolicy(n, [PolicySegment(0, gains, full, M.copy(), M.copy())])
        r2 = simulate(basis, coeffs, data, win, policy=policy)
        for m in range(k1 - k0):
            inj, _ = policy.apply(m, times[k0 + m], r2.states[:, m])
            injections[:, k0 + m] = inj
        cost[:, k0:k1] = r2.cost
        glued = r1.states + r2.states
        states[:, k0 + 1 : k1 + 1] = glued[:, 1:]
        bcost = math.fsum(r2.cost.ravel()) / P
        dnorm = float(np.mean(np.sum(data**2, axis=1)))
        length = float(times[k1] - times[k0])
        lb = 2 * float(log_gamma(p, length)) + math.log(length) + (math.log(dnorm) if dnorm > 0 else -math.inf)
        bound = math.exp(lb) if lb < 700 else math.inf
        blocks.append(
            SourceBlock(
                k=k,
                start=float(times[k0]),
                end=float(times[k1]),
                data_norm=dnorm,
                cost=bcost,
                cost_bound=bound,
                end_y2_norm=float(np.mean(np.sum(r2.states[:, -1] ** 2, axis=1))),
                epsilon=eps,
            )
        )
        data = glued[:, -1]
    # free tail with source on [T_K, T]
    kK = int(block_starts[K])
    if kK < steps:
        Ft = Fa[:, kK:]
        rt = simulate(basis, coeffs, data, paths.window(kK, steps),
                      source=Ft if Ft.shape[0] == P else np.broadcast_to(Ft, (P,) + Ft.shape[1:]))
        states[:, kK + 1 :] = rt.states[:, 1:]
    weighted = weighted_report(states, cost, Fa, times, kK, p, n)
    return SourceTermResult(
        times=times,
        states=states,
        injections=injections,
        cost=cost,
        source=Fa,
        blocks=blocks,
        K=K,
        block_starts=np.asarray(block_starts),
        weighted=weighted,
        n_modes=n,
        final_norm=float(np.mean(np.sum(states[:, -1] ** 2, axis=1))),
        data_norm=float(np.mean(np.sum(x0**2, axis=1))),
        paths=paths,
    )


def weighted_report(states, cost, F, times, kK, p, n):
    """rho0-weighted quantities over ``[0, T_K]``: ``E sup |y/rho0|^2``,
    ``E sup |z/rho0|^2``, ``E int int_D0 |h/rho0|^2`` and the right side
    ``E(|y0|^2 + |z0|^2) + E int |F/rho|^2``."""
    tt = times[: kK + 1]
    l0 = log_rho0(p, tt)
    w = np.exp(-2 * l0)
    y2 = np.sum(states[:, : kK + 1, :n] ** 2, axis=2)
    z2 = np.sum(states[:, : kK + 1, n:] ** 2, axis=2)
    sup_y = float(np.mean(np.max(y2 * w, axis=1)))
    sup_z = float(np.mean(np.max(z2 * w, axis=1)))
    h = float(np.mean(np.sum(cost[:, :kK] * w[None, :-1], axis=1)))
    rhs = float(np.mean(np.sum(states[:, 0] ** 2, axis=1))) + _weighted_source_norm(F[:, :kK], times[: kK + 1], p)
    out = {"sup_y_rho0": sup_y, "sup_z_rho0": sup_z, "control_rho0": h, "rhs": rhs}
    out["ratio"] = (sup_y + sup_z + h) / rhs if rhs > 0 else (0.0 if sup_y + sup_z + h == 0 else math.inf)
    out["finite"] = all(math.isfinite(v) for v in (sup_y, sup_z, h, rhs))
    return out


def direct_replay(basis, coeffs, result):
    """Simulate the full system once with the recorded control and source on
    the same path; returns the max modal deviation from the glued trajectory."""
    P = result.states.shape[0]
    F = result.source if result.source.shape[0] == P else np.broadcast_to(result.source, (P,) + result.source.shape[1:])
    inj = result.injections

    class _Replay:
        def apply(self, k, t, x):
            return inj[:, k], 0.0

    rec = simulate(basis, coeffs, result.states[:, 0], result.paths, policy=_Replay(), source=F)
    return float(np.max(np.abs(rec.states - result.states))), rec


def regular_trajectory_report(basis, result, p, t=None):
    """rho_hat-weighted regularity quantities of the glued trajectory over
    ``[0, T_K]`` (or up to ``t``): sup |y/rho_hat|_{H^2}^2, sup |z/rho_hat|_{H^1}^2,
    int |y/rho_hat|_{H^4}^2, int |z/rho_hat|_{H^2}^2 (path means) and their
    sum's ratio to the right side."""
    kK = int(result.block_starts[-1])
    t = result.times[kK] if t is None else float(t)
    kmax = int(np.searchsorted(result.times, t + 1e-14, side="right")) - 1
    P = result.states.shape[0]
    acc = XtAccumulator(basis, p, P)
    for k in range(kmax + 1):
        acc.update(result.states[:, k], result.times[k])
    comp = {k: float(np.mean(v)) for k, v in acc.components().items()}
    total = sum(comp.values())
    rhs = result.weighted["rhs"]
    comp["ratio"] = total / rhs if rhs > 0 else (0.0 if total == 0 else math.inf)
    comp["finite"] = bool(np.isfinite(total)) and not bool(np.any(acc.blowup))
    return comp


def run_source_term(basis, coeffs, x0, p, n_paths, seed, F=None, steps_per_block=400, tail_steps=200, rel_tol=1e-12, **kw):
    """Convenience wrapper: build the grid and paths, then run the blocks."""
    K = truncation_index(p, rel_tol)
    times, starts = block_times(p, K, steps_per_block, tail_steps)
    paths = brownian_batch(times, n_paths, seed)
    return source_term_control(basis, coeffs, x0, p, paths, F=F, K=K, block_starts=starts, rel_tol=rel_tol, **kw)
