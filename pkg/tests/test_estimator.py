import json
import math

import numpy as np
import pytest

from windobs.estimator import (
    CholeskyDowndateFailure, FilterDivergence, FilterState, SquareRootUKF, UkfConfig,
    _repair, circular_error, cholupdate, consistent_initial_state, qr_factor, run_filter,
    wrap_angle,
)
from windobs.models import StateConfig, build_dynamics, build_sensors
from windobs.simulator import (
    BodyParams, constant_wind, drag_equilibrium, integrate, measure, n_turns, straight,
)
from oracles import compare_with_plain

U = (1.0, 0.3, 0.2)
X0 = np.array([1.2, 0.4, 0.3, 0.1, 0.8, 1.9])


@pytest.fixture(scope="module")
def ukf():
    return SquareRootUKF()


def small_state(scale=1e-6):
    return FilterState(X0.copy(), scale * np.eye(6))


def random_factor(rng, n=6, scale=0.1):
    A = rng.normal(size=(n, n)) * scale
    return np.linalg.cholesky(A @ A.T + 0.01 * np.eye(n))


def test_wrap_angle():
    assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(0.5) == 0.5
    assert circular_error(0.1, 2 * math.pi - 0.1) == pytest.approx(0.2)


def test_config_validation():
    with pytest.raises(ValueError):
        UkfConfig(R=np.diag([1e-7, 0.0, 1e-7]))
    with pytest.raises(ValueError):
        UkfConfig(dt=0.0)
    with pytest.raises(ValueError):
        SquareRootUKF(UkfConfig(Q=1e-10 * np.eye(5)))
    wm, wc, gamma = UkfConfig().weights(6)
    assert wm.sum() == pytest.approx(1.0, abs=1e-9)
    assert gamma == pytest.approx(1e-3 * math.sqrt(6))


def test_cholupdate_matches_dense(ukf):
    rng = np.random.default_rng(2)
    S = random_factor(rng)
    v = rng.normal(size=6) * 0.05
    up = cholupdate(S, v, 1.0)
    np.testing.assert_allclose(up @ up.T, S @ S.T + np.outer(v, v), atol=1e-14)
    down = cholupdate(up, v, -1.0)
    np.testing.assert_allclose(down @ down.T, S @ S.T, atol=1e-13)
    assert np.allclose(np.triu(down, 1), 0)
    with pytest.raises(CholeskyDowndateFailure):
        cholupdate(S, 10 * np.ones(6), -1.0)


def test_qr_factor_and_repair():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(4, 9))
    S = qr_factor(A)
    np.testing.assert_allclose(S @ S.T, A @ A.T, atol=1e-12)
    assert np.all(np.diag(S) > 0)
    diag = {}
    P = np.array([[1.0, 1.0], [1.0, 1.0]])
    L = _repair(P, diag)
    assert diag["inflations"] >= 1
    np.testing.assert_allclose(L @ L.T, P, atol=1e-6)


def test_sigma_mean_identity(ukf):
    rng = np.random.default_rng(4)
    fs = FilterState(X0.copy(), random_factor(rng))
    X = ukf.sigma_points(fs)
    assert X.shape == (6, 13)
    np.testing.assert_allclose(ukf.mean(X), fs.x, rtol=0, atol=1e-12)
    D = X - fs.x[:, None]
    np.testing.assert_allclose((ukf.wc[1:] * D[:, 1:]) @ D[:, 1:].T, fs.P, rtol=1e-9)


def test_predict_only_mean_tracks_simulator(ukf):
    traj = integrate(BodyParams(), straight(U[0], U[1]), constant_wind(X0[4], X0[5]), 0.01, 1.0,
                     X0[:4])
    fs = small_state()
    for i in range(100):
        fs = ukf.predict(fs, traj.controls[i])
    np.testing.assert_allclose(fs.x[:4], traj.states[-1], atol=1e-9)
    np.testing.assert_allclose(fs.x[4:], X0[4:], atol=1e-12)


def test_predict_does_not_shrink_uncertainty():
    # without drag nothing contracts, so prediction can only add uncertainty
    m = build_dynamics(StateConfig())
    f = SquareRootUKF(model=m, sensors=build_sensors("calibrated-vision", m))
    fs = FilterState(np.array([0.0, 0.0, 0.3, 0.0, 0.8, 1.9]),
                     np.diag([0.1, 0.1, 0.01, 0.01, 0.5, 1.0]))
    trace = np.trace(fs.P)
    for _ in range(20):
        fs = f.predict(fs, (0.0, 0.0, 0.0))
        assert np.trace(fs.P) >= trace - 1e-12
        trace = np.trace(fs.P)


def test_update_shrinks_and_zero_innovation_keeps_mean(ukf):
    rng = np.random.default_rng(5)
    fs = FilterState(X0.copy(), random_factor(rng))
    y = ukf.observe(fs.x[:, None], U)[:, 0] + 0.01
    post, innov = ukf.update(fs, y, U)
    assert np.trace(post.P) <= np.trace(fs.P)
    assert not np.allclose(post.x, fs.x)
    y_hat = y - innov
    exact, innov0 = ukf.update(fs, y_hat, U)
    np.testing.assert_allclose(innov0, 0.0, atol=1e-12)
    np.testing.assert_allclose(exact.x, fs.x, atol=1e-12)


def test_matches_full_covariance_filter_over_fifty_steps():
    # moderate R keeps the sigma spread well above float64 resolution
    f = SquareRootUKF(UkfConfig(R=1e-2 * np.eye(3)))
    for seed in range(3):
        gap64, gap_exact = compare_with_plain(f, seed=seed)
        assert gap64 <= 1e-8 and gap_exact <= 1e-8


def test_tight_measurements_hit_the_float64_floor():
    # with R = 1e-7 any float64 sigma-point filter drifts ~1e-8 from exact arithmetic
    gap64, gap_exact = compare_with_plain(SquareRootUKF(), seed=1)
    assert gap_exact < 1e-6 and gap64 < 1e-6


def test_huge_measurement_noise_gives_open_loop():
    cfg = UkfConfig(R=1e12 * np.eye(3), Q=1e-14 * np.eye(6))
    f = SquareRootUKF(cfg)
    rng = np.random.default_rng(7)
    a = b = FilterState(X0.copy(), 1e-4 * np.eye(6))
    for _ in range(50):
        a = f.predict(a, U)
        b, _ = f.step(b, U, rng.normal(size=3))
    np.testing.assert_allclose(b.x, a.x, atol=1e-6)


def test_missing_channels_are_skipped():
    f = SquareRootUKF()
    fs = small_state(1e-3)
    y = f.observe(fs.x[:, None], U)[:, 0] + 0.01
    y[1] = np.nan
    _, innov = f.update(fs, y, U)
    assert np.isnan(innov[1]) and np.all(np.isfinite(innov[[0, 2]]))
    assert f.diagnostics["missing_channel_samples"] == 1
    same, innov = f.update(fs, np.full(3, np.nan), U)
    assert same is fs and np.all(np.isnan(innov))


def test_angle_residual_is_wrapped(ukf):
    fs = small_state(1e-3)
    y = ukf.observe(fs.x[:, None], U)[:, 0]
    a, ia = ukf.update(fs, y + np.array([0.01, 0, 0]), U)
    b, ib = ukf.update(fs, y + np.array([0.01 + 2 * math.pi, 0, 0]), U)
    np.testing.assert_allclose(ia, ib, atol=1e-12)
    np.testing.assert_allclose(a.x, b.x, atol=1e-12)


def _flight(T=4.0, hover=False, seed=0):
    p = BodyParams()
    m = build_dynamics(StateConfig(drag=True))
    wind = constant_wind(0.0 if hover else 1.0, 1.0)
    sched = straight(0.0, 0.0) if hover else n_turns(2, 2.0, turn_time=1.0)
    x0 = np.zeros(4) if hover else drag_equilibrium(p, (1.0, 0, 0), (1.0, 1.0))
    traj = integrate(p, sched, wind, 0.01, T, x0)
    return measure(traj, build_sensors("calibrated-vision", m), sigma=1e-3, seed=seed)


def test_run_is_deterministic_and_reports():
    traj = _flight()
    a = run_filter(traj, init=consistent_initial_state(traj, 2.0))
    b = run_filter(traj, init=consistent_initial_state(traj, 2.0))
    np.testing.assert_array_equal(a.mean, b.mean)
    assert a.metrics_json() == b.metrics_json()
    doc = json.loads(a.metrics_json())
    assert doc["steps"] == len(traj) - 1 and doc["diverged"] is False
    assert a.zeta_error.shape == (len(traj),)


def test_hover_with_no_wind_does_not_crash():
    traj = _flight(T=1.0, hover=True)
    assert traj.missing()[:, 1:].all()
    res = run_filter(traj, init=FilterState(np.array([0, 0, 0, 0, 0.1, 1.0]), 0.1 * np.eye(6)))
    assert not res.metrics["diverged"]
    assert res.diagnostics["missing_channel_samples"] == 2 * (len(traj) - 1)


def test_divergence_is_reported(monkeypatch):
    traj = _flight(T=0.5)
    f = SquareRootUKF()

    def broken(X, u):
        return np.full_like(X, np.inf)

    monkeypatch.setattr(f, "propagate", broken)
    res = run_filter(traj, ukf=f)
    assert res.metrics["diverged"] and res.metrics["failure_time"] == pytest.approx(0.01)
    with pytest.raises(FilterDivergence):
        run_filter(traj, ukf=f, raise_on_divergence=True)


def test_dt_mismatch_is_rejected():
    traj = _flight(T=0.2)
    with pytest.raises(ValueError):
        run_filter(traj, UkfConfig(dt=0.02))
