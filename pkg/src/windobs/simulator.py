"""Planar flight simulator, sensor sampling and trajectory classification.

Wind is an exogenous signal: it drives the body-frame dynamics but is never
integrated. Body states are ``[v_par, v_perp, phi, phidot]``; the world-frame
position is integrated alongside for plotting and sanity checks.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .expr import Symbol, add, compile_exprs, free_symbols, mul
from .models import BASE_STATES, CONTROLS, SensorSet, StateConfig, build_dynamics, build_sensors
from .observability import SingularEvaluation, build_algebra, prime_point, state_observable

LABELS = ("unobservable", "observable-not-calibratable", "calibratable")
CSV_HEADER = ("t", "v_par", "v_perp", "phi", "phidot", "w", "zeta",
              "u_par", "u_perp", "u_phi")


class NonFiniteState(FloatingPointError):
    def __init__(self, t):
        super().__init__(f"state became non-finite at t={t:.6g}")
        self.t = t


@dataclass(frozen=True)
class BodyParams:
    m: float = 1.0
    I: float = 1.0
    C_par: float = 1.0
    C_perp: float = 1.0
    C_phi: float = 1.0
    km1: float = 1.0
    km2: float = 0.0
    km3: float = 1.0
    km4: float = 1.0
    drag: bool = True

    def values(self) -> dict[str, float]:
        """Parameter values keyed by model symbol name (drag off means C = 0)."""
        out = {k: getattr(self, k) for k in ("m", "I", "km1", "km2", "km3", "km4")}
        for k in ("C_par", "C_perp", "C_phi"):
            out[k] = getattr(self, k) if self.drag else 0.0
        return out


def body_rates(x, u, wind, p: BodyParams) -> np.ndarray:
    """Time derivative of ``[v_par, v_perp, phi, phidot]``.

    Works on a single state or on a stack of states with shape ``(4, ...)``.
    """
    v_par, v_perp, phi, phidot = x[0], x[1], x[2], x[3]
    u_par, u_perp, u_phi = u
    w, zeta = wind
    if p.drag:
        rel = phi - zeta
        a_par = v_par - w * np.cos(rel)
        a_perp = v_perp + w * np.sin(rel)
        d_par, d_perp, d_phi = p.C_par * a_par, p.C_perp * a_perp, p.C_phi * phidot
    else:
        d_par = d_perp = d_phi = 0.0
    return np.array([
        (u_par * p.km1 - d_par) / p.m + v_perp * phidot,
        (u_perp * p.km3 - d_perp) / p.m - v_par * phidot,
        phidot + 0.0 * v_par,
        (u_par * p.km2 + u_phi * p.km4 - d_phi) / p.I,
    ])


# ---------------------------------------------------------------------------
# control schedules


@dataclass
class ControlSchedule:
    """``fn(t, x) -> (u_par, u_perp, u_phi)``; ``x`` is the body state."""

    fn: Callable[[float, np.ndarray], tuple[float, float, float]]
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __call__(self, t, x=None):
        return tuple(float(v) for v in self.fn(t, x))


def piecewise(times: Sequence[float], values: Sequence[Sequence[float]], name="piecewise"):
    """Piecewise-constant controls; ``values[i]`` holds from ``times[i]`` on."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)

    def fn(t, x):
        i = max(int(np.searchsorted(times, t, side="right")) - 1, 0)
        return values[i]

    return ControlSchedule(fn, name, {"times": times.tolist(), "values": values.tolist()})


def straight(u_par=1.0, u_perp=0.0):
    return ControlSchedule(lambda t, x: (u_par, u_perp, 0.0), "straight",
                           {"u_par": u_par, "u_perp": u_perp})


def turn_pulses(starts: Sequence[float], directions: Sequence[int], turn_time=0.5,
                magnitude=1.0, u_par=1.0, lateral=0.5, brake=True):
    """Square torque pulses; each turn is a pulse and, with ``brake``, an
    opposite pulse of the same length that stops the rotation again.

    Lateral thrust ``lateral * direction`` is applied while a pulse is on.
    """
    starts = [float(s) for s in starts]
    directions = [int(d) for d in directions]

    def fn(t, x):
        for s, d in zip(starts, directions):
            if s <= t < s + turn_time:
                return u_par, lateral * d, magnitude * d
            if brake and s + turn_time <= t < s + 2 * turn_time:
                return u_par, lateral * d, -magnitude * d
        return u_par, 0.0, 0.0

    return ControlSchedule(fn, "turns", {"starts": starts, "directions": directions,
                                         "turn_time": turn_time, "magnitude": magnitude,
                                         "u_par": u_par, "lateral": lateral, "brake": brake})


def n_turns(count: int, period: float, magnitude=1.0, duty=0.5, start=0.0, u_par=1.0,
            lateral=0.0, turn_time: float | None = None):
    """Alternating left/right turns: one square ``u_phi`` pulse of length
    ``duty * period`` per period, sign flipping each turn, straight flight in
    between. The pulse is not braked, so rotational drag (or the next pulse)
    ends each turn. ``turn_time`` fixes the pulse length directly, so runs
    with different turn counts can share identical turns.
    """
    on = turn_time if turn_time is not None else duty * period
    if on > period:
        raise ValueError("turn pulse longer than the turn period")

    def fn(t, x):
        k = math.floor((t - start) / period)
        if t < start or k >= count:
            return u_par, 0.0, 0.0
        sign = 1.0 if k % 2 == 0 else -1.0
        if (t - start) - k * period < on:
            return u_par, lateral * sign, magnitude * sign
        return u_par, 0.0, 0.0

    return ControlSchedule(fn, "n-turns", {"count": count, "period": period,
                                           "magnitude": magnitude, "duty": duty,
                                           "start": start, "u_par": u_par,
                                           "lateral": lateral, "turn_time": on})


def single_turn(at=2.0, turn_time=0.5, magnitude=1.0, u_par=1.0, lateral=0.5):
    s = turn_pulses([at], [1], turn_time, magnitude, u_par, lateral)
    s.name = "single-turn"
    return s


def two_turns(first=2.0, gap=3.0, turn_time=0.5, magnitude=1.0, u_par=1.0, lateral=0.5):
    s = turn_pulses([first, first + gap], [1, -1], turn_time, magnitude, u_par, lateral)
    s.name = "two-turns"
    return s


def direction_changes(period=2.0, u_par=1.0, lateral=1.0):
    """Course changes from alternating lateral thrust, no torque."""

    def fn(t, x):
        return u_par, lateral if (t // (period / 2)) % 2 == 0 else -lateral, 0.0

    return ControlSchedule(fn, "direction-changes", {"period": period, "u_par": u_par,
                                                     "lateral": lateral})


def orbit(u_par=1.0, lateral=0.5, freq=1.0):
    """Steady rotation (set by the initial ``phidot``) with oscillating lateral thrust."""
    return ControlSchedule(lambda t, x: (u_par, lateral * math.sin(freq * t), 0.0), "orbit",
                           {"u_par": u_par, "lateral": lateral, "freq": freq})


def rotate_in_place(u_phi=1.0):
    return ControlSchedule(lambda t, x: (0.0, 0.0, u_phi), "rotate-in-place", {"u_phi": u_phi})


def constant_course_rotation(course=0.0, thrust=1.0):
    """Thrust along a fixed world-frame course while the body rotates freely.

    Needs the body state, so it is a feedback schedule.
    """

    def fn(t, x):
        rel = course - x[2]
        return thrust * math.cos(rel), thrust * math.sin(rel), 0.0

    return ControlSchedule(fn, "constant-course-rotation", {"course": course, "thrust": thrust})


# ---------------------------------------------------------------------------
# wind


@dataclass
class WindSignal:
    """Wind magnitude and direction as functions of time (``w >= 0``)."""

    fn: Callable[[float], tuple[float, float]]
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __call__(self, t):
        w, zeta = self.fn(t)
        return max(float(w), 0.0), float(zeta)


def constant_wind(w=1.0, zeta=math.pi / 2):
    return WindSignal(lambda t: (w, zeta), "constant", {"w": w, "zeta": zeta})


def sinusoid_wind(w=1.0, w_amp=0.2, w_freq=0.05, zeta=0.0, zeta_amp=0.5, zeta_freq=0.02,
                  phase=0.0):
    def fn(t):
        return (w + w_amp * math.sin(2 * math.pi * w_freq * t + phase),
                zeta + zeta_amp * math.sin(2 * math.pi * zeta_freq * t + phase))

    return WindSignal(fn, "sinusoid", {"w": w, "w_amp": w_amp, "w_freq": w_freq, "zeta": zeta,
                                       "zeta_amp": zeta_amp, "zeta_freq": zeta_freq,
                                       "phase": phase})


def random_walk_wind(T: float, w=1.0, zeta=0.0, sigma_w=0.01, sigma_zeta=0.01, step=0.1,
                     seed=0):
    """Gaussian random walk sampled every ``step`` seconds, linearly interpolated.

    The magnitude is reflected at zero.
    """
    rng = np.random.default_rng(seed)
    n = int(math.ceil(T / step)) + 2
    grid = np.arange(n) * step
    ws = np.abs(w + np.concatenate([[0.0], np.cumsum(rng.normal(0, sigma_w, n - 1))]))
    zs = zeta + np.concatenate([[0.0], np.cumsum(rng.normal(0, sigma_zeta, n - 1))])

    def fn(t):
        return float(np.interp(t, grid, ws)), float(np.interp(t, grid, zs))

    return WindSignal(fn, "random-walk", {"T": T, "w": w, "zeta": zeta, "sigma_w": sigma_w,
                                          "sigma_zeta": sigma_zeta, "step": step, "seed": seed})


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    dt: float
    t: np.ndarray
    states: np.ndarray      # (N, 4) v_par, v_perp, phi, phidot
    wind: np.ndarray        # (N, 2) w, zeta
    controls: np.ndarray    # (N, 3)
    position: np.ndarray | None = None  # (N, 2) world x, y
    sensor_labels: tuple[str, ...] = ()
    true: np.ndarray | None = None      # (N, k); nan where undefined
    noisy: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t)

    def column(self, name: str) -> np.ndarray:
        if name in BASE_STATES[:4]:
            return self.states[:, BASE_STATES.index(name)]
        if name in ("w", "zeta"):
            return self.wind[:, ("w", "zeta").index(name)]
        if name in CONTROLS:
            return self.controls[:, CONTROLS.index(name)]
        raise KeyError(name)

    def ground_speed(self):
        return np.hypot(self.states[:, 0], self.states[:, 1])

    def airspeed(self):
        rel = self.states[:, 2] - self.wind[:, 1]
        a_par = self.states[:, 0] - self.wind[:, 0] * np.cos(rel)
        a_perp = self.states[:, 1] + self.wind[:, 0] * np.sin(rel)
        return np.hypot(a_par, a_perp)

    def missing(self) -> np.ndarray:
        """Boolean mask of undefined measurement samples."""
        if self.true is None:
            return np.zeros((len(self), 0), dtype=bool)
        return ~np.isfinite(self.true)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            write_csv(self, fh)

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            return read_csv(fh)


def _fmt(v: float) -> str:
    return "" if not np.isfinite(v) else repr(float(v))


def write_csv(traj: Trajectory, fh):
    w = csv.writer(fh, lineterminator="\n")
    labels = list(traj.sensor_labels)
    w.writerow(list(CSV_HEADER) + [f"{lab}:true" for lab in labels]
               + [f"{lab}:noisy" for lab in labels])
    k = len(labels)
    for i in range(len(traj)):
        row = [traj.t[i], *traj.states[i], *traj.wind[i], *traj.controls[i]]
        if k:
            row += list(traj.true[i]) + list(traj.noisy[i])
        w.writerow([_fmt(v) for v in row])


def read_csv(fh) -> Trajectory:
    r = csv.reader(fh)
    header = next(r)
    if tuple(header[:len(CSV_HEADER)]) != CSV_HEADER:
        raise ValueError(f"unexpected trajectory header {header[:len(CSV_HEADER)]}")
    extra = header[len(CSV_HEADER):]
    k = len(extra) // 2
    labels = tuple(h.rsplit(":", 1)[0] for h in extra[:k])
    rows = [[float(v) if v != "" else np.nan for v in row] for row in r]
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    t = data[:, 0]
    dt = float(t[1] - t[0]) if len(t) > 1 else 0.0
    return Trajectory(dt=dt, t=t, states=data[:, 1:5], wind=data[:, 5:7],
                      controls=data[:, 7:10], sensor_labels=labels,
                      true=data[:, 10:10 + k] if k else None,
                      noisy=data[:, 10 + k:10 + 2 * k] if k else None)


def _world_velocity(x):
    c, s = math.cos(x[2]), math.sin(x[2])
    return np.array([x[0] * c - x[1] * s, x[0] * s + x[1] * c])


def rk4_step(x, t, dt, schedule, wind, params):
    """One classical Runge-Kutta step; controls are sampled at the step start."""
    u = schedule(t, x)

    def f(tt, xx):
        return body_rates(xx, u, wind(tt), params)

    k1 = f(t, x)
    k2 = f(t + dt / 2, x + dt / 2 * k1)
    k3 = f(t + dt / 2, x + dt / 2 * k2)
    k4 = f(t + dt, x + dt * k3)
    return x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4), u


def integrate(params: BodyParams, schedule: ControlSchedule, wind: WindSignal, dt: float,
              T: float, x0: Sequence[float]) -> Trajectory:
    """Integrate the body-frame dynamics on a uniform grid of ``T/dt + 1`` samples."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if T < dt:
        raise ValueError("T must be at least dt")
    n = int(round(T / dt))
    t = np.arange(n + 1) * dt
    X = np.empty((n + 1, 4))
    W = np.empty((n + 1, 2))
    U = np.empty((n + 1, 3))
    pos = np.zeros((n + 1, 2))
    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (4,):
        raise ValueError("initial state must be [v_par, v_perp, phi, phidot]")
    for i in range(n + 1):
        X[i] = x
        W[i] = wind(t[i])
        if i == n:
            U[i] = schedule(t[i], x)
            break
        with np.errstate(over="ignore", invalid="ignore"):
            x_next, U[i] = rk4_step(x, t[i], dt, schedule, wind, params)
        if not np.all(np.isfinite(x_next)):
            raise NonFiniteState(t[i + 1])
        # trapezoid on world velocity is plenty for plotting
        pos[i + 1] = pos[i] + dt / 2 * (_world_velocity(x) + _world_velocity(x_next))
        x = x_next
    return Trajectory(dt=dt, t=t, states=X, wind=W, controls=U, position=pos,
                      meta={"schedule": schedule.name, "wind": wind.name})


def measure(traj: Trajectory, sensors: SensorSet, sigma: float | Sequence[float] = 0.0,
            seed: int = 0, param_values: Mapping[str, float] | None = None) -> Trajectory:
    """Fill the true and noisy measurement columns.

    Samples where a channel is undefined (zero denominator) are stored as
    ``nan`` in both columns and reported by ``Trajectory.missing()``.
    """
    names = list(BASE_STATES) + list(CONTROLS)
    syms = {}
    for e in sensors.h:
        for s in free_symbols(e):
            syms[s.name] = s
    params = dict(param_values or {})
    unknown = [n for n in syms if n not in names and n not in params]
    if unknown:
        raise KeyError(f"no value for sensor parameters {sorted(unknown)}")
    order = names + sorted(n for n in syms if n not in names)
    f = compile_exprs(list(sensors.h), [syms.get(n, Symbol(n)) for n in order],
                      vectorized=True)
    cols = {"v_par": traj.states[:, 0], "v_perp": traj.states[:, 1],
            "phi": traj.states[:, 2], "phidot": traj.states[:, 3],
            "w": traj.wind[:, 0], "zeta": traj.wind[:, 1],
            "u_par": traj.controls[:, 0], "u_perp": traj.controls[:, 1],
            "u_phi": traj.controls[:, 2]}
    args = [cols[n] if n in cols else np.full(len(traj), float(params[n])) for n in order]
    true = np.asarray(f(args)).T.copy()
    true[~np.isfinite(true)] = np.nan
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), (true.shape[1],))
    rng = np.random.default_rng(seed)
    noise = rng.normal(size=true.shape) * sig
    traj.sensor_labels = tuple(sensors.labels)
    traj.true = true
    traj.noisy = true + noise
    traj.meta.update(sigma=sig.tolist(), seed=seed)
    return traj


# ---------------------------------------------------------------------------
# classification


def _dwell(mask: np.ndarray) -> bool:
    """True when the mask holds on two consecutive samples."""
    return bool(np.any(mask[1:] & mask[:-1]))


def classify_trajectory(traj: Trajectory, eps: float = 1e-6) -> str:
    """Label a trajectory by the conditions it satisfies.

    * observable: airspeed and ground speed nonzero, some thrust, and a change
      in course or orientation;
    * calibratable: additionally a nonzero turn rate while both thrust
      directions are active.
    """
    v_par, v_perp, _, phidot = traj.states.T
    ground = traj.ground_speed() > eps
    air = traj.airspeed() > eps
    psi = np.unwrap(np.arctan2(v_perp, v_par))
    psi_rate = np.gradient(psi, traj.dt) if len(traj) > 1 else np.zeros(len(traj))
    turning = np.abs(phidot) > eps
    course_change = (np.abs(psi_rate) > eps) | turning
    u_par, u_perp = np.abs(traj.controls[:, 0]) > eps, np.abs(traj.controls[:, 1]) > eps
    base = ground & air
    if _dwell(base & turning & u_par & u_perp):
        return "calibratable"
    if _dwell(base & course_change & (u_par | u_perp)):
        return "observable-not-calibratable"
    return "unobservable"


class _DirectionalModel:
    """A dynamics model whose control fields are replaced by ``k`` symbolic
    combinations ``g_j = sum_c d_jc f_c``; the ``d_jc`` are bound per point."""

    def __init__(self, model, k: int):
        self.states = model.states
        self.f0 = model.f0
        self.coeffs = [[model.table.symbol(f"d{j}_{c}") for c in CONTROLS] for j in range(k)]
        self.fields = {"f0": model.f0}
        for j, row in enumerate(self.coeffs):
            self.fields[f"g{j}"] = tuple(
                add(*(mul(d, model.field(c)[i]) for d, c in zip(row, CONTROLS)))
                for i in range(len(model.states)))

    def field(self, name):
        return self.fields[name]


def control_span(controls: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Orthonormal basis (rows) of the span of the control vectors in a window."""
    if len(controls) == 0:
        return np.zeros((0, 3))
    _, s, vt = np.linalg.svd(np.asarray(controls, dtype=float), full_matrices=False)
    return vt[: int(np.sum(s > eps))]


class RankClassifier:
    """Point-wise rank verdicts along a trajectory.

    At each probed sample the control directions are the span of the control
    vectors inside a window around it. ``zeta`` is deemed observable when it
    passes the augmentation test for the calibrated no-drag model, and
    calibratable when it passes for the uncalibrated vision model with drag,
    dynamic wind and unknown body, motor and sensor parameters.
    """

    UNKNOWN = ("C_par", "C_perp", "C_phi", "ks1", "ks2", "ks3", "ks4", "ks5",
               "m", "km1", "km3", "I")

    def __init__(self, frame_offset: float = 1.0):
        self.frame_offset = frame_offset
        self.models = {
            "observable": build_dynamics(StateConfig()),
            "calibratable": build_dynamics(StateConfig(drag=True, wind_dynamic=True,
                                                       unknown=self.UNKNOWN)),
        }
        self.sensors = {
            "observable": build_sensors("calibrated-vision", self.models["observable"]),
            "calibratable": build_sensors("uncalibrated-vision", self.models["calibratable"]),
        }
        self._algebras = {}

    def algebra(self, kind: str, k: int):
        key = (kind, k)
        if key not in self._algebras:
            dm = _DirectionalModel(self.models[kind], k)
            gs = [f"g{j}" for j in range(k)]
            paths = [(), ("f0",)] + [(g,) for g in gs]
            if kind == "calibratable":
                paths += [("f0", "f0")] + [("f0", g) for g in gs]
            self._algebras[key] = (build_algebra(dm, self.sensors[kind], paths=paths), dm)
        return self._algebras[key]

    def zeta_observable(self, kind: str, state, wind, basis) -> bool:
        alg, dm = self.algebra(kind, len(basis))
        model = self.models[kind]
        vals = dict(zip(BASE_STATES, list(state) + list(wind)))
        # verdicts do not depend on where the global angle origin sits; a generic
        # rotation keeps trajectory angles (often exactly 0 or pi/2) off
        # coincidence points where the augmentation test is unreliable
        vals["phi"] += self.frame_offset
        vals["zeta"] += self.frame_offset
        point = prime_point(alg.vars, {model.sym(n): v for n, v in vals.items()})
        for row, d in zip(dm.coeffs, basis):
            point.update(zip(row, d))
        try:
            return state_observable(alg, point, model.sym("zeta"))
        except SingularEvaluation:
            return False

    def verdicts(self, traj: Trajectory, stride: int | None = None, window: float = 0.25,
                 eps: float = 1e-6) -> dict[str, np.ndarray]:
        """Boolean verdict arrays (``observable``, ``calibratable``) at probed samples."""
        n = len(traj)
        stride = stride or max(1, n // 200)
        half = max(1, int(round(window / traj.dt)))
        idx = np.arange(0, n, stride)
        out = {"index": idx, "observable": np.zeros(len(idx), bool),
               "calibratable": np.zeros(len(idx), bool)}
        for j, i in enumerate(idx):
            basis = control_span(traj.controls[max(0, i - half): i + half + 1], eps)
            for kind in ("observable", "calibratable"):
                out[kind][j] = self.zeta_observable(kind, traj.states[i], traj.wind[i], basis)
        return out

    def classify(self, traj: Trajectory, **kw) -> str:
        v = self.verdicts(traj, **kw)
        if np.any(v["calibratable"] & v["observable"]):
            return "calibratable"
        if np.any(v["observable"]):
            return "observable-not-calibratable"
        return "unobservable"


def rank_classify_trajectory(traj: Trajectory, **kw) -> str:
    return RankClassifier().classify(traj, **kw)


def drag_equilibrium(params: BodyParams, u, wind, phi: float = 0.0) -> np.ndarray:
    """Translational trim under constant thrust and wind (drag on), not rotating.

    Airspeed settles where thrust balances drag; ground velocity is airspeed
    plus wind expressed in the body frame. Torque is ignored, so this is the
    natural start for a run that begins straight or with its first turn.
    """
    if not params.drag:
        raise ValueError("equilibrium needs the drag model")
    u_par, u_perp = u[0], u[1]
    w, zeta = wind
    a_par = params.km1 * u_par / params.C_par
    a_perp = params.km3 * u_perp / params.C_perp
    return np.array([a_par + w * math.cos(phi - zeta), a_perp - w * math.sin(phi - zeta),
                     phi, 0.0])
