import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kslab.weights import (
    CarlemanParams,
    SourceWeightParams,
    WeightParameterError,
    carleman_bounds_check,
    carleman_eval,
    default_carleman,
    fitted_weight_constants,
    log_gamma,
    log_rho,
    log_rho0,
    log_rho_hat,
    psi_build,
    source_grid,
    source_weights_eval,
    weight_relation_residual,
)


def test_psi_vanishes_at_ends_and_positive_inside():
    psi = psi_build((0.45, 0.55))
    assert abs(psi(0.0)) < 1e-14 and abs(psi(1.0)) < 1e-14
    x = np.linspace(0, 1, 10001)[1:-1]
    assert np.all(psi(x) > 0)


def test_psi_critical_point_inside_d1_only():
    psi = psi_build((0.45, 0.55))
    x = np.linspace(0, 1, 10001)
    outside = (x < 0.45) | (x > 0.55)
    assert np.min(np.abs(psi.deriv(x[outside]))) > 0


def test_psi_symmetric_for_centred_interval():
    psi = psi_build((0.45, 0.55))
    assert psi(0.25) == pytest.approx(psi(0.75), rel=1e-12)


@pytest.mark.parametrize("d1", [(0.0, 0.5), (0.1, 0.2), (0.8, 0.9), (0.5, 0.4)])
def test_psi_rejects_unusable_interval(d1):
    with pytest.raises(WeightParameterError):
        psi_build(d1)


def test_carleman_parameter_constraints():
    psi = psi_build((0.45, 0.55))
    with pytest.raises(WeightParameterError):
        CarlemanParams(mu=1, lam=1, m=3, k_const=5, psi=psi, T=1)
    with pytest.raises(WeightParameterError):
        CarlemanParams(mu=1, lam=1, m=4, k_const=4, psi=psi, T=1)
    p = CarlemanParams(mu=1, lam=1, m=4, k_const=5, psi=psi, T=1)
    assert p.c2 == pytest.approx(5 * psi.sup)
    assert p.c1 == pytest.approx(5 * 5 / 4 * psi.sup)


def test_alpha_negative_and_theta_vanishes_at_start():
    p = default_carleman()
    x, t = np.meshgrid(np.linspace(0, 1, 201), np.linspace(1e-3, 1 - 1e-3, 201))
    v = carleman_eval(p, x, t)
    assert np.all(v.alpha < 0)
    assert np.all(carleman_eval(p, np.linspace(0, 1, 11), 1e-4).theta == 0)
    s = carleman_eval(p, 0.3, 0.0)
    assert s.singular and s.theta == 0


def test_phi_minimum_at_boundary():
    p = default_carleman()
    x = np.linspace(0, 1, 1001)
    for t in (0.2, 0.5, 0.9):
        phi = carleman_eval(p, x, t).phi
        assert phi[0] == pytest.approx(phi.min()) and phi[-1] == pytest.approx(phi.min())


def test_bounds_finite_and_lambda_homogeneous():
    base = default_carleman()
    reps = [carleman_bounds_check(base.with_lambda(lam), q=1, n_t=400, n_x=400) for lam in (2, 4, 8)]
    for r in reps:
        assert np.isfinite(r.C_time) and np.isfinite(r.C_space)
    for a, b in zip(reps, reps[1:]):
        assert b.C_space == pytest.approx(a.C_space, rel=0.1)
    r3 = carleman_bounds_check(base, q=3, n_t=400, n_x=400)
    assert np.isfinite(r3.C_time) and np.isfinite(r3.C_space)


def test_bounds_stable_under_refinement():
    p = default_carleman()
    a = carleman_bounds_check(p, q=1, n_t=1000, n_x=1000)
    b = carleman_bounds_check(p, q=1, n_t=10000, n_x=1000)
    c = carleman_bounds_check(p, q=1, n_t=1000, n_x=10000)
    for r in (b, c):
        assert r.C_time == pytest.approx(a.C_time, rel=0.1)
        assert r.C_space == pytest.approx(a.C_space, rel=0.1)


@pytest.mark.parametrize(
    "kw",
    [dict(M=0), dict(T=1.0), dict(Q=1.5), dict(P=2.0), dict(zeta=3.5), dict(zeta=4.0)],
)
def test_source_params_validation(kw):
    with pytest.raises(WeightParameterError):
        SourceWeightParams(**kw)


def test_weights_vanish_at_horizon(weights):
    _, r0, r, rh = source_weights_eval(weights, weights.T)
    assert r0 == r == rh == 0.0
    with pytest.raises(WeightParameterError):
        log_gamma(weights, 0.0)


def test_weights_nonincreasing(weights):
    t = np.linspace(0, weights.T, 2001)
    for f in (log_rho0, log_rho, log_rho_hat):
        assert np.all(np.diff(f(weights, t)) <= 0)


def test_exponent_ordering(weights):
    # rho vanishes fastest, then rho0, then rho_hat
    assert weights.k_rho_hat < weights.k_rho0 < weights.k_rho


def test_fitted_comparison_constants_finite(weights):
    c = fitted_weight_constants(weights)
    assert all(np.isfinite(v) and v > 0 for v in c.values())
    assert c["rho0_over_rho_hat"] <= 1.0 and c["rho_over_rho_hat"] <= 1.0


def test_source_grid_examples(weights):
    g = source_grid(weights, 10)
    assert g.times[0] == 0.0
    assert g.times[1] == pytest.approx(1 / 12, rel=1e-14)
    assert np.sum(g.lengths) == pytest.approx(weights.T - weights.T / weights.Q**10, rel=1e-14)


valid = st.tuples(
    st.floats(0.1, 5), st.floats(1.01, 1.4), st.floats(0.05, 0.95), st.floats(0.01, 0.99), st.floats(0.01, 0.99)
)


def _draw(M, Q, T, u, v):
    pmin = Q**2 / (2 - Q**2)
    P = pmin + 0.1 + 10 * u
    lo = (1 + P) * Q**2 / 2
    zeta = lo + v * (P - lo)
    return SourceWeightParams(M=M, P=P, Q=Q, zeta=zeta, T=T)


@settings(max_examples=100, deadline=None)
@given(valid)
def test_weight_relation_holds(args):
    p = _draw(*args)
    for k in range(41):
        assert weight_relation_residual(p, k) <= 1e-12
