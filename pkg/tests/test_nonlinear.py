import math

import numpy as np
import pytest

from kslab.basis import SpectralBasis
from kslab.nonlinear import (
    Cutoff,
    cutoff_eval,
    data_norm_sq,
    f_R_eval,
    fixed_point_solve,
    lipschitz_probe,
    sample_small_data,
    statistical_certificate,
    truncated_replay,
    wilson_interval,
)
from kslab.sde import Advection, SystemCoefficients, brownian_batch
from kslab.sourceterm import block_times, truncation_index
from kslab.weights import SourceWeightParams


# ---------------------------------------------------------------- cutoff


def test_cutoff_values():
    c = Cutoff(2.0)
    assert c(0.0) == 1.0 and c(2.0) == 1.0
    assert c(4.0) == 0.0 and c(100.0) == 0.0
    assert float(c(3.0)) == pytest.approx(0.5, abs=1e-15)


def test_cutoff_smooth_and_monotone():
    c = Cutoff(1.0)
    s = np.linspace(0, 3, 3001)
    v = c(s)
    assert np.all(np.diff(v) <= 1e-15)
    d = c.derivative(s)
    fd = np.gradient(v, s)
    assert np.max(np.abs(d - fd)) < 1e-3
    assert np.max(np.abs(d)) == pytest.approx(c.max_derivative, rel=1e-5)
    assert c.max_derivative == pytest.approx(15 / 8)


def test_cutoff_rejects_bad_input():
    with pytest.raises(ValueError):
        Cutoff(0.0)
    with pytest.raises(ValueError):
        cutoff_eval(Cutoff(1.0), -0.1)


# ---------------------------------------------------------------- f_R


def test_f_R_cases():
    b = SpectralBasis(8)
    y = 1.0 / np.arange(1, 9) ** 2
    c = Cutoff(1.0)
    ref = Advection(b)(y[None])[0]
    assert np.allclose(f_R_eval(b, y, None, 0.5, c), ref, rtol=0, atol=0)
    assert np.all(f_R_eval(b, y, None, 2.0, c) == 0)
    assert np.all(f_R_eval(b, y, None, 5.0, c) == 0)
    assert np.all(f_R_eval(b, np.zeros(8), None, 0.1, c) == 0)


def test_advection_quadratic_scaling():
    b = SpectralBasis(8)
    adv = Advection(b)
    y = np.random.default_rng(3).standard_normal((2, 8))
    assert np.allclose(adv(3 * y), 9 * adv(y), rtol=1e-12, atol=1e-14)


# ---------------------------------------------------------------- Lipschitz


@pytest.fixture(scope="module")
def setting():
    b = SpectralBasis(8)
    co = SystemCoefficients(0.1, 0.05, 0.1)
    p = SourceWeightParams()
    K = truncation_index(p)
    times, starts = block_times(p, K, 100, 50)
    return b, co, p, K, times, starts


def test_lipschitz_identical_pair_is_zero(setting):
    b, co, p, K, times, starts = setting
    s = np.random.default_rng(0).standard_normal((len(times), 16)) * 1e-3
    rep = lipschitz_probe(b, s, s, times, p, 1.0, upto=int(starts[-1]))
    assert rep.constant == 0.0


def test_lipschitz_both_beyond_cutoff_is_zero(setting):
    b, co, p, K, times, starts = setting
    rng = np.random.default_rng(1)
    s1 = rng.standard_normal((len(times), 16))
    s2 = rng.standard_normal((len(times), 16))
    rep = lipschitz_probe(b, s1, s2, times, p, 1e-3, upto=int(starts[-1]))
    assert min(rep.max_xt) > 2e-3
    assert rep.constant == 0.0


def test_lipschitz_constant_finite_and_stable(setting):
    b, co, p, K, times, starts = setting
    rng = np.random.default_rng(2)
    upto = int(starts[-1])
    base = rng.standard_normal(16) * 1e-21
    s1 = np.tile(base, (len(times), 1))
    s2 = s1 * (1 + 1e-3)
    R = 1.0
    rep = lipschitz_probe(b, s1, s2, times, p, R, upto=upto)
    rep2 = lipschitz_probe(b, s1, s1 * (1 + 2e-3), times, p, R, upto=upto)
    assert np.isfinite(rep.constant) and rep.constant > 0
    assert rep2.constant == pytest.approx(rep.constant, rel=0.05)


# ---------------------------------------------------------------- fixed point


def _data(b, n_paths, scale, seed=0):
    x0 = sample_small_data(b, n_paths, 1.0, seed)
    return x0 / np.sqrt(data_norm_sq(b, x0))[:, None] * scale


def test_fixed_point_zero_data(setting):
    b, co, p, K, times, starts = setting
    paths = brownian_batch(times, 4, 0)
    fp = fixed_point_solve(b, co, np.zeros((4, 16)), p, 1.0, paths, starts, K, 24.0)
    assert fp.converged and fp.iterations == 1 and fp.distances == [0.0]
    assert np.all(fp.final.states == 0)


@pytest.fixture(scope="module")
def active_fp(setting):
    # R comparable with X_t so that the truncated nonlinearity is active
    b, co, p, K, times, starts = setting
    paths = brownian_batch(times, 10, 0)
    x0 = _data(b, 10, 1.0)
    return fixed_point_solve(b, co, x0, p, 1e21, paths, starts, K, 24.0, max_iters=30), x0


def test_fixed_point_contracts(active_fp):
    fp, _ = active_fp
    assert fp.converged and fp.iterations > 2
    assert all(r < 1 for r in fp.ratios[1:])
    assert fp.distances[-1] < 1e-6 * fp.distances[0]


def test_fixed_point_source_active(active_fp):
    fp, _ = active_fp
    assert np.any(fp.F != 0)


def test_fixed_point_matches_direct_truncated_simulation(active_fp, setting):
    b, co, p, *_ = setting
    fp, _ = active_fp
    dev, rec = truncated_replay(b, co, fp, p, fp.R)
    scale = float(np.max(np.abs(fp.final.states)))
    assert dev <= 1e-6 * scale


def test_fixed_point_final_state_small(active_fp):
    fp, x0 = active_fp
    assert fp.yT_norm <= 1e-5 * fp.data_scale


def test_fixed_point_reports_unconverged_when_iterations_run_out(setting):
    b, co, p, K, times, starts = setting
    paths = brownian_batch(times, 4, 0)
    x0 = _data(b, 4, 100.0)
    fp = fixed_point_solve(b, co, x0, p, 1e24, paths, starts, K, 24.0, max_iters=3)
    assert not fp.converged and fp.iterations == 3 and len(fp.distances) == 3


def test_fixed_point_rejects_bad_radius(setting):
    b, co, p, K, times, starts = setting
    with pytest.raises(ValueError):
        fixed_point_solve(b, co, np.zeros(16), p, 0.0, brownian_batch(times, 2, 0), starts, K, 24.0)


# ---------------------------------------------------------------- certificate


def test_wilson_interval():
    lo, hi = wilson_interval(0, 100)
    assert lo == 0 and 0.03 < hi < 0.04
    lo, hi = wilson_interval(50, 100)
    assert lo == pytest.approx(0.4038, abs=1e-3) and hi == pytest.approx(0.5962, abs=1e-3)
    with pytest.raises(ValueError):
        wilson_interval(0, 0)


def test_small_data_sampler(basis8):
    x = sample_small_data(basis8, 200, 0.5, 1)
    r = np.sqrt(data_norm_sq(basis8, x))
    assert np.all(r <= 0.5 + 1e-15)
    assert np.all(x[:, 4:8] == 0) and np.all(x[:, 12:] == 0)


def test_certificate_zero_data(basis8, noisy, weights):
    cert = statistical_certificate(basis8, noisy, weights, 24.0, n_paths=20, delta=0.0,
                                   steps_per_block=40, tail_steps=10)
    assert cert.exceedance_count == 0 and cert.empirical_mean_XT2 == 0
    assert cert.wide_ci_warning


def test_certificate_markov_and_chunking(basis8, noisy, weights):
    kw = dict(n_paths=24, steps_per_block=40, tail_steps=10, R=1e20, delta=1.0)
    a = statistical_certificate(basis8, noisy, weights, 24.0, chunk=24, **kw)
    b = statistical_certificate(basis8, noisy, weights, 24.0, chunk=7, **kw)
    da, db = a.to_dict(), b.to_dict()
    for key, v in da.items():
        if isinstance(v, float):
            assert db[key] == pytest.approx(v, rel=1e-12, abs=0)
        else:
            assert db[key] == v
    assert 0 < a.exceedance_count < 24
    assert a.exceedance_fraction <= a.markov_bound
    assert a.markov_ok


def test_certificate_workers_invariant(basis8, noisy, weights):
    kw = dict(n_paths=16, steps_per_block=30, tail_steps=10, chunk=8)
    a = statistical_certificate(basis8, noisy, weights, 24.0, **kw)
    b = statistical_certificate(basis8, noisy, weights, 24.0, workers=2, **kw)
    assert a.to_dict() == b.to_dict()


def test_certificate_defaults(basis8, noisy, weights):
    C = 24.0
    cert = statistical_certificate(basis8, noisy, weights, C, n_paths=10, steps_per_block=30, tail_steps=10)
    assert cert.R == pytest.approx(math.exp(-C / weights.T))
    assert cert.delta == pytest.approx(math.exp(-2 * C / weights.T) * math.sqrt(0.1))


def test_untruncated_replay_reproduces_trajectory_below_cutoff(active_fp, setting):
    # on paths with sup X_t <= R the cutoff is inactive, so the original
    # (untruncated) nonlinearity gives the same trajectory
    from kslab.sde import simulate

    b, co, p, *_ = setting
    fp, _ = active_fp
    res = fp.final
    upto = int(res.block_starts[-1])
    below = np.max(fp.xt[:, : upto + 1], axis=1) <= fp.R
    assert np.any(below)
    inj = res.injections

    class Replay:
        def apply(self, k, t, x):
            return inj[below][:, k], 0.0

    rec = simulate(b, co, res.states[below, 0], res.paths.subset(np.flatnonzero(below)).window(0, upto),
                   policy=Replay(), nonlinear={"R": 1e300, "weights": p})
    ref = res.states[below, : upto + 1]
    dt = float(np.max(np.diff(res.times[: upto + 1])))
    assert np.max(np.abs(rec.states - ref)) <= dt * np.max(np.abs(ref))


def test_fixed_point_control_is_adapted(setting):
    from kslab.sde import BrownianBatch

    b, co, p, K, times, starts = setting
    ks = 150
    base = brownian_batch(times, 2, 4)
    inc = base.increments.copy()
    inc[1, :ks] = inc[0, :ks]
    paths = BrownianBatch(base.times, inc, base.seed)
    x0 = np.repeat(_data(b, 1, 1.0), 2, axis=0)
    fp = fixed_point_solve(b, co, x0, p, 1e21, paths, starts, K, 24.0, max_iters=30)
    inj = fp.final.injections
    assert np.array_equal(inj[0, :ks], inj[1, :ks])
    assert np.array_equal(fp.F[0, :ks], fp.F[1, :ks])
    assert not np.array_equal(fp.final.states[0, -1], fp.final.states[1, -1])
