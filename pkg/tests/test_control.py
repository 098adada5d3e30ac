import math

import numpy as np
import pytest

from kslab.basis import SpectralBasis
from kslab.control import (
    ControlError,
    ControlPolicy,
    PolicySegment,
    band_system,
    cost_curve,
    discrete_riccati,
    fit_exponential_blowup,
    lebeau_robbiano_synthesize,
    lr_schedule,
    partial_spectral_control,
    riccati_backward,
    scalar_riccati_closed_form,
    solve_riccati,
)
from kslab.sde import BrownianBatch, brownian_batch, simulate, uniform_times

from conftest import decaying_data


def test_schedule_first_interval():
    s = lr_schedule(1.0, 1.0, 16)
    assert s.intervals[0].tau == 0.5 and s.intervals[0].r == 16.0
    assert s.controlled_time == pytest.approx(1.0 - 1.0 / 2**s.J, rel=1e-15)
    assert all(b.r > a.r for a, b in zip(s.intervals, s.intervals[1:]))
    assert s.intervals[-1].band_size == 16


def test_schedule_band_for_beta_pi_squared():
    s = lr_schedule(1.0, np.pi**2, 8)
    assert s.intervals[0].r == pytest.approx(16 * np.pi**4)
    assert s.intervals[0].band_size == 2


@pytest.mark.parametrize("a", [0.0, -3.0, 2.0])
def test_scalar_riccati_closed_form(a):
    eps, tau = 0.05, 0.7
    t, P = solve_riccati([[a]], [[0.0]], [[1.0]], [[1.0]], [[1 / eps]], tau, n_eval=51)
    assert np.allclose(P[:, 0, 0], scalar_riccati_closed_form(a, eps, tau, t), rtol=1e-8, atol=0)


def test_infinite_penalty_gives_zero_riccati(quiet):
    sol = riccati_backward(SpectralBasis(2), (2 * np.pi) ** 4, quiet, 0.1, math.inf)
    assert np.all(sol.P == 0)


def test_discrete_riccati_converges_to_continuous(noisy):
    b = SpectralBasis(2)
    tau, eps = 0.05, 1e-2
    P_c = riccati_backward(b, b.mu[1], noisy, tau, eps).P[0]
    errs = []
    for n in (100, 200, 400):
        _, P_d = discrete_riccati(b, noisy, b.mu[1], tau / n, n, eps)
        errs.append(np.linalg.norm(P_d - P_c) / np.linalg.norm(P_c))
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 0.05


def _window(T, steps, n_paths, seed=0):
    return brownian_batch(uniform_times(T, steps), n_paths, seed)


def test_zero_state_zero_control(basis8, noisy):
    pol, x, res = partial_spectral_control(basis8, noisy, np.zeros(16), _window(0.1, 40, 5), basis8.mu[1], 1e-4)
    assert res.cost == 0 and np.all(x == 0)


def test_empty_band_rejected(basis8, noisy):
    with pytest.raises(ControlError):
        partial_spectral_control(basis8, noisy, np.ones(16), _window(0.1, 40, 2), 10.0, 1e-4)


def test_one_mode_kill_monotone_in_penalty(noisy):
    b = SpectralBasis(4)
    x0 = decaying_data(4)
    norms = []
    for eps in (1e-2, 1e-4, 1e-6):
        _, _, res = partial_spectral_control(b, noisy, x0, _window(0.2, 200, 100, 1), b.mu[0], eps)
        norms.append(res.mid_band_norm)
    assert norms[0] > norms[1] > norms[2]


def test_two_mode_band_kill(quiet):
    b = SpectralBasis(6)
    _, _, res = partial_spectral_control(b, quiet, decaying_data(6), _window(1.0, 400, 20), b.mu[1], 1e-6)
    assert res.mid_band_norm / res.start_norm <= 1e-4


def test_free_half_decays_like_next_mode(quiet):
    # without noise the modes decouple, so on the free half the out-of-band
    # part decays at least like exp(-lam_3 t) and the band residue like exp(-lam_1 t)
    b = SpectralBasis(6)
    tau = 0.1
    _, _, res = partial_spectral_control(b, quiet, decaying_data(6), _window(tau, 400, 20), b.mu[1], 1e-6)
    out_band = math.sqrt(res.mid_norm - res.mid_band_norm)
    bound = math.exp(-b.lam[2] * tau / 2) * out_band + math.exp(-b.lam[0] * tau / 2) * math.sqrt(res.mid_band_norm)
    assert math.sqrt(res.end_norm) <= 1.1 * bound


def test_lr_zero_data(noisy):
    rep = lebeau_robbiano_synthesize(np.zeros(16), 1.0, n_paths=5, n_modes=8, coeffs=noisy)
    assert rep.total_cost == 0 and rep.final_norm == 0


def test_lr_kill_and_exact_ledger(noisy):
    rep = lebeau_robbiano_synthesize(decaying_data(16), 1.0, n_paths=50, coeffs=noisy, n_modes=16)
    assert rep.final_norm <= 1e-6 * rep.initial_norm
    assert rep.contracting
    assert rep.total_cost == math.fsum(rep.ledger.ravel()) / rep.n_paths
    assert rep.total_cost == pytest.approx(math.fsum(rep.interval_costs), rel=1e-12)
    assert np.isfinite(rep.total_cost)


def test_cost_quadratic_in_data(noisy):
    x0 = decaying_data(8)
    c1 = lebeau_robbiano_synthesize(x0, 0.5, n_paths=10, coeffs=noisy, n_modes=8).total_cost
    c2 = lebeau_robbiano_synthesize(2 * x0, 0.5, n_paths=10, coeffs=noisy, n_modes=8).total_cost
    assert c2 == pytest.approx(4 * c1, rel=1e-10)


def test_policy_is_adapted(basis8, noisy):
    # two paths that agree up to step ks must receive identical controls up to ks
    steps, ks = 80, 37
    base = _window(0.1, steps, 2, 5)
    inc = base.increments.copy()
    inc[1, :ks] = inc[0, :ks]
    paths = BrownianBatch(base.times, inc, base.seed)
    pol = ControlPolicy(8)
    idx = np.arange(3)
    gains, _ = discrete_riccati(basis8, noisy, idx, 0.1 / steps, steps, 1e-4)
    M = np.asarray(basis8.mass_matrix((0.3, 0.7)))
    pol.add(PolicySegment(0, gains, idx, M[idx], M[np.ix_(idx, idx)]))
    rec = simulate(basis8, noisy, decaying_data(8), paths, policy=pol)
    xg = np.linspace(0, 1, 51)
    for k in range(steps):
        h = pol.control_field(k, rec.states[:, k], xg, basis8)
        if k <= ks:
            assert np.array_equal(h[0], h[1])
    assert not np.array_equal(rec.states[0, -1], rec.states[1, -1])
    assert np.array_equal(rec.cost[0, :ks + 1], rec.cost[1, :ks + 1])


def test_band_system_shapes(basis8, noisy):
    A, C, G, B = band_system(basis8, noisy, basis8.mu[2], (0.3, 0.7))
    assert A.shape == (6, 6) and C.shape == (6, 6) and G.shape == (6, 3)
    assert np.allclose(B, B.T) and np.min(np.linalg.eigvalsh(B)) > 0


def test_exponential_fit_recovers_constant():
    Ts = np.array([0.25, 0.5, 1.0])
    C, c, r2 = fit_exponential_blowup(Ts, np.exp(2.0 / Ts + 1.0))
    assert C == pytest.approx(2.0) and c == pytest.approx(1.0) and r2 == pytest.approx(1.0)


def test_cost_curve_needs_three_horizons():
    with pytest.raises(ValueError):
        cost_curve([0.5, 1.0], decaying_data(4))
