import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

import _oracles as oracle
from twofactor.kalman import (
    FilterState,
    NumericalError,
    kf_run,
    kf_step,
    neg_log_likelihood,
    state_confidence_band,
)
from twofactor.model import (
    TRUE_THETA,
    ParamVector,
    measurement_system,
    stationary_moments,
    swap_labels,
    transition_system,
)
from twofactor.simulate import (
    MaturitySchedule,
    ObservationPanel,
    RngSeed,
    constant_schedule,
    make_maturity_schedule,
    simulate_observations,
    simulate_states,
)

LOG_2PI = math.log(2 * math.pi)


def make_panel(theta, dt, tau, seed=0):
    tau = np.asarray(tau, dtype=float)
    path = simulate_states(theta, None, dt, tau.shape[0], RngSeed(seed))
    return simulate_observations(theta, path, MaturitySchedule(tau), RngSeed(seed, 1))


@st.composite
def small_problems(draw):
    n = draw(st.integers(1, 3))
    T = draw(st.integers(1, 8))
    k = draw(st.floats(0.05, 5.0))
    g = draw(st.floats(0.05, 5.0))
    theta = ParamVector(
        kappa=k,
        gamma=g,
        mu_xi=draw(st.floats(-3, 3)),
        sigma_chi=draw(st.floats(0.05, 2.0)),
        sigma_xi=draw(st.floats(0.05, 2.0)),
        rho=draw(st.floats(-0.95, 0.95)),
        lambda_chi=draw(st.floats(-1, 1)),
        lambda_xi=draw(st.floats(-1, 1)),
        s=tuple(draw(st.floats(0.01, 0.5)) for _ in range(n)),
    )
    dt = draw(st.floats(1 / 360, 0.5))
    varying = draw(st.booleans())
    rows = T if varying else 1
    tau = np.array([[draw(st.floats(0.0, 5.0)) for _ in range(n)] for _ in range(rows)])
    tau = np.repeat(tau, T, axis=0) if not varying else tau
    seed = draw(st.integers(0, 2**31))
    return theta, dt, tau, seed


@settings(max_examples=150, deadline=None)
@given(small_problems())
def test_filter_matches_joint_gaussian(problem):
    theta, dt, tau, seed = problem
    panel = make_panel(theta, dt, tau, seed)
    ref = oracle.joint_loglik(theta, panel, dt)
    out = kf_run(theta, panel, dt)
    assert out.log_likelihood == pytest.approx(ref, rel=1e-8, abs=1e-9)
    assert -neg_log_likelihood(theta, panel, dt) == pytest.approx(ref, rel=1e-8, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(small_problems(), st.data())
def test_missing_quotes_match_marginal_density(problem, data):
    theta, dt, tau, seed = problem
    panel = make_panel(theta, dt, tau, seed)
    y = panel.y.copy()
    mask = np.array(data.draw(st.lists(st.booleans(), min_size=y.size, max_size=y.size))).reshape(y.shape)
    y[mask] = np.nan
    holed = ObservationPanel(panel.times, panel.maturities, y)
    out = kf_run(theta, holed, dt)
    assert out.n_observed == int((~mask).sum())
    if out.n_observed == 0:
        assert out.log_likelihood == 0.0
        return
    ref = oracle.joint_loglik(theta, holed, dt)
    assert out.log_likelihood == pytest.approx(ref, rel=1e-8, abs=1e-9)
    assert -neg_log_likelihood(theta, holed, dt) == pytest.approx(ref, rel=1e-8, abs=1e-9)


def test_two_conventions_agree():
    panel = make_panel(TRUE_THETA, 1 / 360, np.tile(np.arange(1, 6) / 12, (400, 1)))
    out = kf_run(TRUE_THETA, panel, 1 / 360)
    n_obs = panel.y.size
    logdet_quad = -out.loglik_terms
    eq7 = 0.5 * n_obs * LOG_2PI + 0.5 * logdet_quad.sum()
    assert out.nll == pytest.approx(eq7, rel=1e-12)
    assert out.total == pytest.approx(out.loglik_terms.sum(), rel=1e-15)
    assert neg_log_likelihood(TRUE_THETA, panel, 1 / 360) == pytest.approx(out.nll, rel=1e-10)
    assert neg_log_likelihood(TRUE_THETA, panel, 1 / 360, fast=False) == out.nll


def test_fast_slow_agree_rolling():
    dt = 1 / 52
    sched = make_maturity_schedule(4, 0.25, 300, dt, rolling=True)
    path = simulate_states(TRUE_THETA, None, dt, 300, RngSeed(3))
    panel = simulate_observations(TRUE_THETA, path, sched, RngSeed(4))
    slow = kf_run(TRUE_THETA, panel, dt).nll
    assert neg_log_likelihood(TRUE_THETA, panel, dt) == pytest.approx(slow, rel=1e-10)


def test_diffuse_noise_limit():
    theta = TRUE_THETA.replace(s=(1e4,))
    dt = 1 / 12
    tau = np.tile([0.1, 0.5, 2.0], (30, 1))
    panel = make_panel(theta, dt, tau, seed=5)
    out = kf_run(theta, panel, dt)
    meas = measurement_system(theta, tau[0])
    a0, _ = stationary_moments(theta)
    trans = transition_system(theta, dt)
    a, ref = a0, 0.0
    Vinv = np.diag(1 / np.diag(meas.V))
    for y in panel.y:
        a = trans.c + trans.G @ a
        e = y - (meas.d + meas.F.T @ a)
        ref += -np.log(np.linalg.det(meas.V)) - e @ Vinv @ e
    assert out.total == pytest.approx(ref, rel=1e-6)


def test_uninformative_observation():
    theta = TRUE_THETA
    trans = transition_system(theta, 0.1)
    trans = type(trans)(c=trans.c, G=trans.G, W=np.zeros((2, 2)), dt=0.1)
    meas = measurement_system(theta.replace(s=(1e8,)), [0.5, 1.0])
    prior = FilterState(np.array([0.3, -2.0]), np.eye(2) * 0.2)
    step = kf_step(prior, trans, meas, np.array([5.0, -5.0]))
    assert np.allclose(step.state.a, step.predicted.a, atol=1e-12)
    assert np.allclose(step.state.P, step.predicted.P, atol=1e-12)


def test_exact_observation_recovers_state():
    theta = TRUE_THETA.replace(s=(1e-9,))
    trans = transition_system(theta, 0.1)
    meas = measurement_system(theta, [0.0, 3.0])
    x = np.array([0.42, -1.7])
    y = meas.d + meas.F.T @ x
    prior = FilterState(*stationary_moments(theta))
    step = kf_step(prior, trans, meas, y)
    assert np.allclose(step.state.a, x, atol=1e-8)
    assert np.max(np.abs(step.state.P)) < 1e-12


def test_scalar_one_step_density():
    theta = TRUE_THETA.replace(s=(0.05,))
    dt, tau, y = 0.25, 0.4, -1.6
    trans = transition_system(theta, dt)
    meas = measurement_system(theta, [tau])
    a0, P0 = stationary_moments(theta)
    step = kf_step(FilterState(a0, P0), trans, meas, np.array([y]))
    m = trans.c + trans.G @ a0
    S = trans.G @ P0 @ trans.G.T + trans.W
    f = meas.F[:, 0]
    mean = meas.d[0] + f @ m
    var = f @ S @ f + 0.05**2
    dens = norm.logpdf(y, mean, math.sqrt(var))
    # l_t = 2 log density + log 2 pi for one observation.
    assert step.loglik == pytest.approx(2 * dens + LOG_2PI, rel=1e-12)


def test_joseph_and_plain_forms_agree():
    panel = make_panel(TRUE_THETA, 1 / 360, np.tile(np.arange(1, 6) / 12, (300, 1)), seed=2)
    a = kf_run(TRUE_THETA, panel, 1 / 360, joseph=True)
    b = kf_run(TRUE_THETA, panel, 1 / 360, joseph=False)
    assert np.allclose(a.a, b.a, rtol=1e-9, atol=1e-12)
    assert np.allclose(a.P, b.P, rtol=1e-6, atol=1e-12)
    assert a.total == pytest.approx(b.total, rel=1e-10)


@settings(max_examples=40, deadline=None)
@given(small_problems())
def test_covariances_stay_psd_and_shrink(problem):
    theta, dt, tau, seed = problem
    tau = np.repeat(tau[:1], 40, axis=0)
    out = kf_run(theta, make_panel(theta, dt, tau, seed), dt)
    for P in (*out.P, *out.P_pred):
        assert np.array_equal(P, P.T)
        assert np.linalg.eigvalsh(P).min() >= -1e-10
    for L in out.L:
        np.linalg.cholesky(L)
    tr = np.trace(out.P, axis1=1, axis2=2)
    tr_pred = np.trace(out.P_pred, axis1=1, axis2=2)
    assert np.all(tr <= tr_pred + 1e-15)


def test_steady_state_reached():
    panel = make_panel(TRUE_THETA, 1 / 360, np.tile(np.arange(1, 6) / 12, (3000, 1)))
    out = kf_run(TRUE_THETA, panel, 1 / 360)
    diffs = np.abs(np.diff(out.P, axis=0)).max(axis=(1, 2))
    assert diffs[-1] < 1e-12
    assert np.all(diffs[-200:] < 1e-12)


def test_filter_failure_reports_step():
    theta = TRUE_THETA
    trans = transition_system(theta, 0.1)
    meas = measurement_system(theta, [0.5])
    bad = type(meas)(d=meas.d, F=meas.F, V=np.array([[-10.0]]), maturities=meas.maturities)
    with pytest.raises(NumericalError):
        kf_step(FilterState(*stationary_moments(theta)), trans, bad, np.array([0.0]))


def test_invalid_theta_gives_inf():
    panel = make_panel(TRUE_THETA, 0.1, np.tile([0.5], (10, 1)))
    assert neg_log_likelihood(TRUE_THETA.replace(rho=1.2), panel, 0.1) == math.inf
    assert neg_log_likelihood(TRUE_THETA.replace(s=(0.1, 0.2)), panel, 0.1) == math.inf


@settings(max_examples=50, deadline=None)
@given(small_problems())
def test_label_switch_invariance(problem):
    theta, dt, tau, seed = problem
    theta = theta.replace(s=theta.s[:1])
    if abs(theta.kappa - theta.gamma) < 1e-3:
        theta = theta.replace(kappa=theta.gamma + 0.5)
    panel = make_panel(theta, dt, tau, seed)
    twin = swap_labels(theta)
    a = neg_log_likelihood(theta, panel, dt)
    b = neg_log_likelihood(twin, panel, dt)
    assert b == pytest.approx(a, rel=1e-9, abs=1e-9)


def test_label_switch_maps_filtered_states():
    theta = TRUE_THETA.replace(lambda_chi=0.1, lambda_xi=-0.05)
    panel = make_panel(theta, 1 / 52, np.tile([0.25, 1.0, 3.0], (100, 1)))
    out = kf_run(theta, panel, 1 / 52)
    twin = kf_run(swap_labels(theta), panel, 1 / 52)
    shift = theta.mu_xi / theta.gamma
    assert np.allclose(twin.a[:, 0], out.a[:, 1] - shift, atol=1e-9)
    assert np.allclose(twin.a[:, 1], out.a[:, 0] + shift, atol=1e-9)


def test_nll_magnitude_large_panel():
    dt, n = 1 / 360, 8000
    panel = make_panel(TRUE_THETA, dt, np.tile(np.arange(1, 6) / 12, (n, 1)), seed=12)
    nll = neg_log_likelihood(TRUE_THETA, panel, dt)
    assert nll < 0
    assert 2e4 < -nll < 2e6


def test_band_quantile_and_degenerate():
    panel = make_panel(TRUE_THETA, 0.1, np.tile([0.5], (5, 1)))
    out = kf_run(TRUE_THETA, panel, 0.1)
    bands = state_confidence_band(out, 0.95)
    assert round(bands.z, 6) == 1.959964
    zero = type(out)(**{**out.__dict__, "P": np.zeros_like(out.P)})
    flat = state_confidence_band(zero)
    assert np.array_equal(flat.chi.lo, out.a[:, 0])
    assert np.array_equal(flat.chi.hi, out.a[:, 0])
    assert np.array_equal(flat.spot.lo, np.exp(out.a.sum(axis=1)))
    with pytest.raises(ValueError):
        state_confidence_band(out, 1.0)


def test_spot_band_uses_log_sum_variance():
    panel = make_panel(TRUE_THETA, 0.1, np.tile([0.5, 2.0], (8, 1)))
    out = kf_run(TRUE_THETA, panel, 0.1)
    b = state_confidence_band(out, 0.9)
    k = 4
    P = out.P[k]
    sd = math.sqrt(P[0, 0] + P[1, 1] + 2 * P[0, 1])
    m = out.a[k].sum()
    assert b.spot.hi[k] == pytest.approx(math.exp(m + norm.ppf(0.95) * sd), rel=1e-14)
    assert b.xi.lo[k] == pytest.approx(out.a[k, 1] - norm.ppf(0.95) * math.sqrt(P[1, 1]), rel=1e-14)


def test_maturing_contract_tracks_spot():
    dt = 1 / 360
    tau = np.tile([0.0, 0.5, 1.0], (500, 1))
    path = simulate_states(TRUE_THETA, None, dt, 500, RngSeed(1))
    panel = simulate_observations(TRUE_THETA, path, MaturitySchedule(tau), RngSeed(2))
    out = kf_run(TRUE_THETA, panel, dt)
    gap = out.a.sum(axis=1) - panel.y[:, 0]
    assert np.sqrt(np.mean(gap**2)) < 2 * 0.03


def test_panel_cache_sees_new_panels():
    p1 = make_panel(TRUE_THETA, 0.1, np.tile([0.5], (20, 1)), seed=1)
    p2 = make_panel(TRUE_THETA, 0.1, np.tile([0.5], (20, 1)), seed=2)
    a = neg_log_likelihood(TRUE_THETA, p1, 0.1)
    b = neg_log_likelihood(TRUE_THETA, p2, 0.1)
    assert a == pytest.approx(kf_run(TRUE_THETA, p1, 0.1).nll, rel=1e-10)
    assert b == pytest.approx(kf_run(TRUE_THETA, p2, 0.1).nll, rel=1e-10)


def test_constant_schedule_helper():
    sch = constant_schedule([0.1, 0.2], 3)
    assert sch.tau.shape == (3, 2) and sch.is_constant
