"""Square-root unscented Kalman filter for the planar wind model.

The filter carries a lower-triangular factor ``S`` with ``P = S S^T``. Sigma
points are propagated through one RK4 step of a symbolic dynamics model
(compiled once), and the factor is maintained with QR decompositions and
rank-one Cholesky updates. The estimates it produces are local: convergence
depends on the trajectory exciting the observable directions and on the
initial guess being close enough.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .expr import compile_exprs
from .models import BASE_STATES, CONTROLS, StateConfig, build_dynamics, build_sensors
from .simulator import Trajectory


class NonFiniteSigmaPoint(FloatingPointError):
    pass


class CholeskyDowndateFailure(np.linalg.LinAlgError):
    pass


class FilterDivergence(RuntimeError):
    def __init__(self, t, cause):
        super().__init__(f"filter diverged at t={t:.6g}: {cause}")
        self.t = t
        self.cause = cause


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    out = np.mod(np.asarray(a, dtype=float) + np.pi, 2 * np.pi) - np.pi
    return np.where(out == -np.pi, np.pi, out)


def circular_error(a, b):
    return np.abs(wrap_angle(np.asarray(a) - np.asarray(b)))


@dataclass
class UkfConfig:
    alpha: float = 1e-3
    beta: float = 2.0
    kappa: float = 0.0
    R: np.ndarray = field(default_factory=lambda: 1e-7 * np.eye(3))
    Q: np.ndarray = field(default_factory=lambda: 1e-10 * np.eye(6))
    dt: float = 0.01
    x0: np.ndarray | None = None
    S0: np.ndarray | None = None

    def __post_init__(self):
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        if np.any(np.diag(self.R) <= 0) or np.any(np.diag(self.Q) <= 0):
            raise ValueError("R and Q diagonals must be strictly positive")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    def weights(self, n: int):
        lam = self.alpha ** 2 * (n + self.kappa) - n
        wm = np.full(2 * n + 1, 1.0 / (2 * (n + lam)))
        wc = wm.copy()
        wm[0] = lam / (n + lam)
        wc[0] = wm[0] + 1 - self.alpha ** 2 + self.beta
        return wm, wc, math.sqrt(n + lam)


@dataclass
class FilterState:
    x: np.ndarray
    S: np.ndarray
    t: float = 0.0

    @property
    def P(self) -> np.ndarray:
        return self.S @ self.S.T

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.sum(self.S ** 2, axis=1))


# ---------------------------------------------------------------------------
# factor maintenance


def cholupdate(S: np.ndarray, v: np.ndarray, sign: float = 1.0) -> np.ndarray:
    """Lower-triangular factor of ``S S^T + sign * v v^T``.

    Raises ``CholeskyDowndateFailure`` when a downdate would lose positive
    definiteness.
    """
    n = len(v)
    L = S.tolist()
    x = [float(a) for a in v]
    for k in range(n):
        Lkk = L[k][k]
        r2 = Lkk * Lkk + sign * x[k] * x[k]
        if not r2 > 0 or math.isinf(r2):
            raise CholeskyDowndateFailure(f"downdate lost definiteness at column {k}")
        r = math.sqrt(r2)
        c, s = r / Lkk, x[k] / Lkk
        L[k][k] = r
        for i in range(k + 1, n):
            L[i][k] = (L[i][k] + sign * s * x[i]) / c
            x[i] = c * x[i] - s * L[i][k]
    return np.array(L)


def qr_factor(A: np.ndarray) -> np.ndarray:
    """Lower-triangular ``S`` with ``S S^T = A A^T`` (positive diagonal)."""
    r = np.linalg.qr(A.T, mode="r")
    S = r.T[: A.shape[0], : A.shape[0]]
    return S * np.where(np.diag(S) < 0, -1.0, 1.0)[None, :]


def _signed_factor(dev: np.ndarray, wc: np.ndarray, sqrt_noise: np.ndarray, diag: dict):
    """Factor of ``sum_i wc_i d_i d_i^T + N N^T`` with a possibly negative ``wc_0``."""
    S = qr_factor(np.hstack([np.sqrt(wc[1:]) * dev[:, 1:], sqrt_noise]))
    try:
        return cholupdate(S, math.sqrt(abs(wc[0])) * dev[:, 0], 1.0 if wc[0] >= 0 else -1.0)
    except CholeskyDowndateFailure:
        diag["downdate_failures"] = diag.get("downdate_failures", 0) + 1
        P = (wc * dev) @ dev.T + sqrt_noise @ sqrt_noise.T
        return _repair(P, diag)


def _repair(P: np.ndarray, diag: dict) -> np.ndarray:
    P = 0.5 * (P + P.T)
    jitter = 0.0
    for _ in range(60):
        try:
            return np.linalg.cholesky(P + jitter * np.eye(len(P)))
        except np.linalg.LinAlgError:
            jitter = 1e-12 if jitter == 0 else jitter * 10
            diag["inflations"] = diag.get("inflations", 0) + 1
    raise CholeskyDowndateFailure("covariance could not be repaired")


# ---------------------------------------------------------------------------
# filter


class SquareRootUKF:
    """Square-root UKF over a model's extended state.

    ``angle_channels`` lists measurement indices whose residuals are wrapped.
    The default model is the calibrated vision model with drag, unit
    parameters and constant wind (nominal zero wind dynamics).
    """

    def __init__(self, cfg: UkfConfig | None = None, model=None, sensors=None,
                 angle_channels: Sequence[int] | None = None):
        self.cfg = cfg or UkfConfig()
        self.model = model or build_dynamics(StateConfig(drag=True))
        self.sensors = sensors or build_sensors("calibrated-vision", self.model)
        self.n = len(self.model.states)
        if self.cfg.Q.shape != (self.n, self.n):
            raise ValueError(f"Q must be {self.n}x{self.n}")
        if self.cfg.R.shape != (len(self.sensors.h),) * 2:
            raise ValueError(f"R must match the {len(self.sensors.h)} sensor channels")
        args = list(self.model.states) + list(self.model.controls)
        self._f = compile_exprs(self.model.xdot(), args, vectorized=True)
        self._h = compile_exprs(list(self.sensors.h), args, vectorized=True)
        if angle_channels is None:
            angle_channels = [0] if not self.sensors.phidot_variant else []
        self.angle_channels = list(angle_channels)
        self.wm, self.wc, self.gamma = self.cfg.weights(self.n)
        self.sqrtQ = np.linalg.cholesky(self.cfg.Q)
        self.sqrtR = np.linalg.cholesky(self.cfg.R)
        self.diagnostics: dict = {}

    # -- building blocks

    def sigma_points(self, fs: FilterState) -> np.ndarray:
        G = self.gamma * fs.S
        return np.hstack([fs.x[:, None], fs.x[:, None] + G, fs.x[:, None] - G])

    def mean(self, X: np.ndarray) -> np.ndarray:
        # weights sum to one; centring on the first point avoids cancellation
        return X[:, 0] + (X - X[:, :1]) @ self.wm

    def _rates(self, X, u):
        return self._f(list(X) + [float(v) for v in u])

    def propagate(self, X: np.ndarray, u) -> np.ndarray:
        dt = self.cfg.dt
        k1 = self._rates(X, u)
        k2 = self._rates(X + dt / 2 * k1, u)
        k3 = self._rates(X + dt / 2 * k2, u)
        k4 = self._rates(X + dt * k3, u)
        return X + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)

    def observe(self, X: np.ndarray, u) -> np.ndarray:
        return self._h(list(X) + [float(v) for v in u])

    # -- recursion

    def predict(self, fs: FilterState, u) -> FilterState:
        X = self.propagate(self.sigma_points(fs), u)
        if not np.all(np.isfinite(X)):
            raise NonFiniteSigmaPoint(f"non-finite sigma point at t={fs.t + self.cfg.dt:.6g}")
        x = self.mean(X)
        S = _signed_factor(X - x[:, None], self.wc, self.sqrtQ, self.diagnostics)
        return FilterState(x, S, fs.t + self.cfg.dt)

    def update(self, fs: FilterState, y, u) -> tuple[FilterState, np.ndarray]:
        """Measurement update; returns the new state and the (wrapped) innovation.

        Channels that are missing in ``y`` or undefined at any sigma point are
        skipped for this step.
        """
        y = np.asarray(y, dtype=float)
        X = self.sigma_points(fs)
        Y = self.observe(X, u)
        use = np.isfinite(y) & np.all(np.isfinite(Y), axis=1)
        innov = np.full(len(y), np.nan)
        skipped = int(np.sum(~use))
        if skipped:
            self.diagnostics["missing_channel_samples"] = (
                self.diagnostics.get("missing_channel_samples", 0) + skipped)
        if not np.any(use):
            return fs, innov
        Y = Y[use]
        ang = [i for i, c in enumerate(np.flatnonzero(use)) if c in self.angle_channels]
        dY = Y - Y[:, :1]
        if ang:
            dY[ang] = wrap_angle(dY[ang])
        y_hat = Y[:, 0] + dY @ self.wm
        devY = dY - (dY @ self.wm)[:, None]
        devX = X - fs.x[:, None]
        sqrtR = np.linalg.cholesky(self.cfg.R[np.ix_(use, use)])
        Sy = _signed_factor(devY, self.wc, sqrtR, self.diagnostics)
        Pxy = (self.wc * devX) @ devY.T
        K = np.linalg.solve(Sy.T, np.linalg.solve(Sy, Pxy.T)).T
        r = y[use] - y_hat
        if ang:
            r[ang] = wrap_angle(r[ang])
        innov[use] = r
        x = fs.x + K @ r
        S = fs.S
        try:
            for col in (K @ Sy).T:
                S = cholupdate(S, col, -1.0)
        except CholeskyDowndateFailure:
            self.diagnostics["downdate_failures"] = self.diagnostics.get("downdate_failures", 0) + 1
            S = _repair(fs.P - K @ Sy @ Sy.T @ K.T, self.diagnostics)
        if not np.all(np.isfinite(x)):
            raise NonFiniteSigmaPoint(f"non-finite estimate at t={fs.t:.6g}")
        return FilterState(x, S, fs.t), innov

    def step(self, fs: FilterState, u, y) -> tuple[FilterState, np.ndarray]:
        return self.update(self.predict(fs, u), y, u)


# ---------------------------------------------------------------------------
# experiment driver


@dataclass
class FilterResult:
    t: np.ndarray
    mean: np.ndarray          # (N, n)
    std: np.ndarray           # (N, n)
    innovation: np.ndarray    # (N, k); nan where a channel was skipped
    truth_zeta: np.ndarray
    state_names: tuple[str, ...]
    metrics: dict
    diagnostics: dict

    @property
    def zeta_error(self) -> np.ndarray:
        return circular_error(self.mean[:, self.state_names.index("zeta")], self.truth_zeta)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t"] + list(self.state_names) + [f"std_{s}" for s in self.state_names]
                       + ["innovation_norm"])
            norms = np.sqrt(np.nansum(self.innovation ** 2, axis=1))
            for i in range(len(self.t)):
                w.writerow([repr(float(v)) for v in
                            [self.t[i], *self.mean[i], *self.std[i], norms[i]]])

    def metrics_json(self) -> str:
        return json.dumps(self.metrics, indent=2, sort_keys=True)


def initial_state(traj: Trajectory, zeta_offset=1.0, w_scale=1.0, S0=None) -> FilterState:
    """Start at the true state with ``zeta`` (and optionally ``w``) perturbed."""
    x0 = np.concatenate([traj.states[0], traj.wind[0]])
    x0[5] += zeta_offset
    x0[4] *= w_scale
    if S0 is None:
        S0 = np.diag([0.1, 0.1, 0.01, 0.01, 0.5, 1.0])
    return FilterState(x0, np.asarray(S0, dtype=float), float(traj.t[0]))


def consistent_initial_state(traj: Trajectory, zeta_guess: float, S0=None, C=(1.0, 1.0),
                             km=(1.0, 1.0)) -> FilterState:
    """Initial estimate built from the first measurement and a guess of ``zeta``.

    Assumes the airspeed has settled where thrust balances drag, then solves
    ``a_par = v_par - w cos(phi - zeta)`` and ``a_perp = r v_par + w sin(phi - zeta)``
    for ``v_par`` and ``w``, with ``r`` the measured drift ratio. The result
    reproduces the first measurement exactly, so any later correction of
    ``zeta`` has to come from the trajectory itself.
    """
    phi, _, r = traj.noisy[0, :3]
    u_par, u_perp, _ = traj.controls[0]
    a_par, a_perp = km[0] * u_par / C[0], km[1] * u_perp / C[1]
    c, s = math.cos(phi - zeta_guess), math.sin(phi - zeta_guess)
    v_par, w = np.linalg.solve([[1.0, -c], [r, s]], [a_par, a_perp])
    x0 = np.array([v_par, r * v_par, phi, 0.0, w, zeta_guess])
    if w < 0:
        x0[4], x0[5] = -w, zeta_guess + math.pi
    if S0 is None:
        S0 = np.diag([0.5, 0.5, 0.01, 0.01, 0.5, 1.0])
    return FilterState(x0, np.asarray(S0, dtype=float), float(traj.t[0]))


def run_filter(traj: Trajectory, cfg: UkfConfig | None = None, init: FilterState | None = None,
               ukf: SquareRootUKF | None = None, raise_on_divergence: bool = False
               ) -> FilterResult:
    """Filter a measured trajectory.

    Controls at row ``i`` drive the step from ``t[i]`` to ``t[i+1]`` (as in
    the simulator); the measurement at row ``i+1`` is then assimilated.
    """
    if traj.noisy is None:
        raise ValueError("trajectory has no measurement columns")
    ukf = ukf or SquareRootUKF(cfg)
    cfg = ukf.cfg
    if abs(traj.dt - cfg.dt) > 1e-12:
        raise ValueError(f"trajectory dt {traj.dt} does not match filter dt {cfg.dt}")
    fs = init or initial_state(traj)
    if cfg.x0 is not None:
        fs = FilterState(np.asarray(cfg.x0, float), fs.S, fs.t)
    if cfg.S0 is not None:
        fs = FilterState(fs.x, np.asarray(cfg.S0, float), fs.t)
    N, k = len(traj), traj.noisy.shape[1]
    mean = np.full((N, ukf.n), np.nan)
    std = np.full((N, ukf.n), np.nan)
    innov = np.full((N, k), np.nan)
    failure = None
    # overflow on the way to a divergence is reported through ``failure``
    with np.errstate(over="ignore", invalid="ignore"):
        mean[0], std[0] = fs.x, fs.std
        for i in range(N - 1):
            try:
                fs, innov[i + 1] = ukf.step(fs, traj.controls[i], traj.noisy[i + 1])
            except (NonFiniteSigmaPoint, CholeskyDowndateFailure, np.linalg.LinAlgError) as exc:
                failure = FilterDivergence(float(traj.t[i + 1]), exc)
                if raise_on_divergence:
                    raise failure from exc
                break
            mean[i + 1], std[i + 1] = fs.x, fs.std
    names = tuple(s.name for s in ukf.model.states)
    result = FilterResult(traj.t.copy(), mean, std, innov, traj.wind[:, 1].copy(), names,
                          {}, dict(ukf.diagnostics))
    result.metrics = filter_metrics(result, failure)
    return result


def filter_metrics(res: FilterResult, failure: FilterDivergence | None = None) -> dict:
    err = res.zeta_error
    N = len(err)
    tail = err[int(math.floor(0.8 * N)):]
    head = err[: max(1, int(math.ceil(0.2 * N)))]
    finite = np.isfinite(err)
    out = {
        "diverged": failure is not None or not bool(np.all(finite)),
        "failure_time": None if failure is None else failure.t,
        "final_zeta_error": float(err[-1]) if finite[-1] else None,
        "zeta_error_at_10pct": float(err[int(0.1 * (N - 1))]),
        "zeta_circular_rmse_final_20pct": float(np.sqrt(np.mean(tail ** 2))),
        "zeta_circular_rmse_first_20pct": float(np.sqrt(np.mean(head ** 2))),
        "innovation_rms": float(np.sqrt(np.nanmean(res.innovation ** 2)))
        if np.any(np.isfinite(res.innovation)) else None,
        "steps": N - 1,
        "diagnostics": {k: v for k, v in sorted(res.diagnostics.items())},
    }
    return out
