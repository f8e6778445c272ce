"""Execute scenarios: rank analyses, simulations and filter runs.

Each ``run_*`` function returns an ``Outcome`` holding machine-readable
results, PASS/FAIL checks against the scenario's ``[expected]`` block and a
plain-text report.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import simulator as sim
from .estimator import (
    SquareRootUKF, UkfConfig, consistent_initial_state, initial_state, run_filter,
)
from .models import StateConfig, build_dynamics, build_sensors, parse_query
from .observability import (
    SingularEvaluation, build_algebra, independent_rows, observability_map, prime_point,
    rank_at,
)
from .scenario import Scenario, ScenarioError

GAP_MIN = 1e6

PRESETS = {
    "straight": sim.straight,
    "single-turn": sim.single_turn,
    "two-turns": sim.two_turns,
    "n-turns": sim.n_turns,
    "direction-changes": sim.direction_changes,
    "orbit": sim.orbit,
    "rotate-in-place": sim.rotate_in_place,
    "constant-course-rotation": sim.constant_course_rotation,
}
WINDS = {"constant": sim.constant_wind, "sinusoid": sim.sinusoid_wind,
         "random-walk": sim.random_walk_wind}


@dataclass
class Check:
    item: str
    expected: object
    actual: object
    status: str  # PASS, FAIL or INCONCLUSIVE

    @property
    def ok(self):
        return self.status == "PASS"


@dataclass
class Outcome:
    scenario: str
    kind: str
    results: dict = field(default_factory=dict)
    checks: list[Check] = field(default_factory=list)
    report: str = ""
    error: str | None = None
    exit_code: int = 0
    artifacts: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(c.ok for c in self.checks) and self.exit_code == 0

    def check(self, item, expected, actual, ok=None, inconclusive=False):
        ok = (expected == actual) if ok is None else ok
        status = "INCONCLUSIVE" if inconclusive and ok else ("PASS" if ok else "FAIL")
        self.checks.append(Check(item, expected, actual, status))

    def check_lines(self) -> list[str]:
        return [f"{c.status:12s} {self.scenario}: {c.item} expected={c.expected} actual={c.actual}"
                for c in self.checks]


def state_config(sc: Scenario) -> StateConfig:
    m = sc["model"]
    return StateConfig(drag=m["drag"], wind_dynamic=m["wind_dynamic"], unknown=m["unknown"],
                       values=m["values"], absorb_mass=m["absorb_mass"],
                       control_states=m["control_states"])


def model_and_sensors(sc: Scenario):
    model = build_dynamics(state_config(sc))
    s = sc["sensors"]
    sensors = build_sensors(s["kind"], model, s["phidot_variant"], s["extra"])
    return model, sensors


# ---------------------------------------------------------------------------
# analysis


def _table_rows(sc: Scenario, model, sensors) -> list[tuple[str, str]]:
    cfg = model.config
    dyn = ("drag" if cfg.drag else "no drag") + (", dynamic wind" if cfg.wind_dynamic
                                                 else ", constant wind")
    known = [p for p in ("C_par", "C_perp", "C_phi", "m", "I", "km1", "km2", "km3", "km4")
             if p not in cfg.unknown and (cfg.drag or not p.startswith("C"))]
    ov = sc["points"]["overrides"]
    return [
        ("Dynamics", dyn),
        ("Calibrated parameters", ", ".join(known) or "-"),
        ("Uncalibrated parameters", ", ".join(model.label(p) for p in cfg.unknown) or "-"),
        ("Sensors", "; ".join(sensors.labels)),
        ("Required actuations", ", ".join(sc["controls"]["active"]) or "none"),
        ("Required state", ", ".join(f"{k}={v}" for k, v in ov.items()) or "generic (prime point)"),
    ]


def run_analysis(sc: Scenario, workers: int = 1) -> Outcome:
    out = Outcome(sc.name, "analyze")
    model, sensors = model_and_sensors(sc)
    alg_cfg = sc["algebra"]
    algebra = build_algebra(model, sensors, sc["controls"]["active"], alg_cfg["order"],
                            alg_cfg["cross_terms"])
    rel = alg_cfg["rel_tol"]
    names = {s.name: s for s in algebra.vars}

    def to_syms(mapping, where):
        bad = [k for k in mapping if k not in names]
        if bad:
            raise ScenarioError(f"{where} names {bad} which are not in the extended state",
                                sc.path)
        return {names[k]: float(v) for k, v in mapping.items()}

    base = prime_point(algebra.vars, to_syms(sc["points"]["overrides"], "[points] overrides"))
    queries = sc.queries() or [(s.name, s.name) for s in algebra.vars]
    qexprs = [(label, parse_query(text, model.table)) for label, text in queries]
    exp = sc.expected()
    rows = _table_rows(sc, model, sensors)
    out.results = {"scenario": sc.name, "vars": [s.name for s in algebra.vars],
                   "algebra": algebra.labels, "table": dict(rows)}
    try:
        report = rank_at(algebra, base, qexprs, rel)
    except SingularEvaluation as exc:
        out.error = str(exc)
        out.results["report"] = {"error": str(exc)}
        if exp.get("singular"):
            out.check("base point singular", True, True)
        else:
            out.exit_code = 2
        out.report = _format_analysis(rows, None, out)
        return out

    out.results["report"] = report.to_dict()
    gap_ok = report.rank == report.dim or report.gap >= GAP_MIN
    out.results["gap_conclusive"] = gap_ok
    inconclusive = not gap_ok
    if "singular" in exp:
        out.check("base point singular", exp["singular"], False)
    if "rank" in exp:
        out.check("rank", exp["rank"], report.rank, inconclusive=inconclusive)
    if "dim" in exp:
        out.check("dim", exp["dim"], report.dim)
    if "fully_observable" in exp:
        out.check("fully observable", exp["fully_observable"], report.fully_observable,
                  inconclusive=inconclusive)
    verdicts = dict(report.queries)
    for label in exp.get("observable", ()):
        out.check(f"{label} observable", True, verdicts.get(label), inconclusive=inconclusive)
    for label in exp.get("unobservable", ()):
        out.check(f"{label} observable", False, verdicts.get(label), inconclusive=inconclusive)
    aug = {}
    for key, want in exp.items():
        if key.startswith("augmented_rank."):
            label = key.split(".", 1)[1]
            q = dict(qexprs).get(label)
            if q is None:
                out.check(key, want, "no such query", ok=False)
                continue
            r = rank_at(algebra.extended([(label, q)]), base, rel=rel)
            aug[label] = r.rank
            out.check(f"rank with {label} appended", want, r.rank,
                      inconclusive=not (r.rank == r.dim or r.gap >= GAP_MIN))
    out.results["augmented_ranks"] = aug
    if "independent_rows" in exp:
        got = independent_rows(algebra, base, rel)
        out.results["independent_rows"] = got
        out.check("independent rows", [int(i) for i in exp["independent_rows"]], got)

    grid = sc["points"]["grid"]
    if grid:
        reports = observability_map(algebra, base, [to_syms(g, "[points] grid") for g in grid],
                                    qexprs, workers, rel)
        out.results["grid"] = [dict(r.to_dict(), override=g) for g, r in zip(grid, reports)]
        for key, want in exp.items():
            if not key.startswith("grid."):
                continue
            label = key.split(".", 1)[1]
            got = []
            for r in reports:
                if r.error:
                    got.append("singular")
                else:
                    got.append("observable" if dict(r.queries).get(label) else "unobservable")
            want = list(want)
            ok = len(want) == len(got) and all(
                w == g or (w == "unobservable-or-singular" and g != "observable")
                for w, g in zip(want, got))
            out.check(f"{label} over grid", want, got, ok=ok)
    out.report = _format_analysis(rows, report, out)
    if any(c.status != "PASS" for c in out.checks):
        out.exit_code = 3
    return out


def _format_analysis(rows, report, out: Outcome) -> str:
    w = max(len(k) for k, _ in rows)
    lines = [f"Scenario {out.scenario}", ""]
    lines += [f"  {k.ljust(w)}  {v}" for k, v in rows]
    lines.append("")
    if report is None:
        lines.append(f"  base point: {out.error}")
    else:
        lines.append(f"  rank {report.rank} of {report.dim} "
                     f"({'fully observable' if report.fully_observable else 'rank deficient'}), "
                     f"{report.rows} algebra rows, gap "
                     f"{'inf' if not math.isfinite(report.gap) else f'{report.gap:.3g}'}")
        for q, ok in report.queries:
            lines.append(f"    {q:24s} {'observable' if ok else 'NOT observable'}")
    if out.checks:
        lines.append("")
        lines += ["  " + s for s in out.check_lines()]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# simulation


def body_params(sc: Scenario) -> sim.BodyParams:
    s = sc["simulation"]
    return sim.BodyParams(drag=s["drag"], **{k: float(v) for k, v in s["params"].items()})


def build_schedule(sc: Scenario):
    c = sc["controls"]
    if c["schedule"] not in PRESETS:
        raise ValueError(f"unknown schedule preset {c['schedule']!r}")
    return PRESETS[c["schedule"]](**c["schedule_params"])


def build_wind(sc: Scenario):
    s = sc["simulation"]
    if s["wind"] not in WINDS:
        raise ValueError(f"unknown wind signal {s['wind']!r}")
    kw = dict(s["wind_params"])
    if s["wind"] == "random-walk":
        kw.setdefault("T", s["T"])
    return WINDS[s["wind"]](**kw)


def simulate(sc: Scenario, seed: int | None = None) -> sim.Trajectory:
    s = sc["simulation"]
    params, schedule, wind = body_params(sc), build_schedule(sc), build_wind(sc)
    if s["x0"].strip() == "equilibrium":
        x0 = sim.drag_equilibrium(params, schedule(0.0, np.zeros(4)), wind(0.0))
    else:
        x0 = [float(v) for v in s["x0"].split(",")]
    traj = sim.integrate(params, schedule, wind, s["dt"], s["T"], x0)
    model, sensors = model_and_sensors(sc)
    values = {p: model.config.value(p) for p in model.config.unknown}
    sim.measure(traj, sensors, s["noise"] if len(s["noise"]) > 1 else s["noise"][0],
                s["seed"] if seed is None else seed, values)
    traj.meta["scenario"] = sc.name
    return traj


def gnuplot_script(csv_name: str, title: str) -> str:
    return "\n".join([
        "set datafile separator ','",
        "set key autotitle columnhead",
        f"set title '{title}'",
        "set multiplot layout 2,1",
        "set xlabel 't [s]'",
        f"plot '{csv_name}' using 1:2 with lines, '' using 1:3 with lines, "
        "'' using 1:5 with lines",
        f"plot '{csv_name}' using 1:4 with lines, '' using 1:7 with lines",
        "unset multiplot", "",
    ])


def run_simulation(sc: Scenario, seed: int | None = None, rank_check: bool = True) -> Outcome:
    out = Outcome(sc.name, "simulate")
    try:
        traj = simulate(sc, seed)
    except sim.NonFiniteState as exc:
        out.error, out.exit_code = str(exc), 4
        out.report = f"Scenario {sc.name}: {exc}\n"
        return out
    label = sim.classify_trajectory(traj)
    out.results = {"scenario": sc.name, "label": label, "samples": len(traj),
                   "missing_samples": int(traj.missing().sum())}
    exp = sc.expected()
    if rank_check or "rank_label" in exp:
        out.results["rank_label"] = sim.rank_classify_trajectory(traj)
    if "label" in exp:
        out.check("predicate label", exp["label"], label)
    if "rank_label" in exp:
        out.check("rank label", exp["rank_label"], out.results["rank_label"])
    out.artifacts["trajectory"] = traj
    lines = [f"Scenario {sc.name}: label {label}"]
    if "rank_label" in out.results:
        lines.append(f"  rank-test label {out.results['rank_label']}")
    lines += ["  " + s for s in out.check_lines()]
    out.report = "\n".join(lines) + "\n"
    if any(not c.ok for c in out.checks):
        out.exit_code = 3
    return out


# ---------------------------------------------------------------------------
# filter


def ukf_config(sc: Scenario) -> UkfConfig:
    f = sc["filter"]
    return UkfConfig(alpha=f["alpha"], beta=f["beta"], kappa=f["kappa"], R=f["r"] * np.eye(3),
                     Q=f["q"] * np.eye(6), dt=sc["simulation"]["dt"])


def run_filter_scenario(sc: Scenario, seed: int | None = None) -> Outcome:
    out = Outcome(sc.name, "filter")
    try:
        traj = simulate(sc, seed)
    except sim.NonFiniteState as exc:
        out.error, out.exit_code = str(exc), 4
        out.report = f"Scenario {sc.name}: {exc}\n"
        return out
    f = sc["filter"]
    S0 = np.diag(f["s0"])
    zeta_guess = traj.wind[0, 1] + f["zeta_offset"]
    if f["init"] == "consistent":
        p = body_params(sc)
        C = (p.C_par, p.C_perp) if p.drag else (1.0, 1.0)
        init = consistent_initial_state(traj, zeta_guess, S0, C, (p.km1, p.km3))
    elif f["init"] == "truth":
        init = initial_state(traj, f["zeta_offset"], S0=S0)
    else:
        raise ValueError(f"unknown filter init {f['init']!r}")
    ukf = SquareRootUKF(ukf_config(sc))
    res = run_filter(traj, init=init, ukf=ukf)
    m = res.metrics
    out.results = {"scenario": sc.name, "metrics": m}
    out.artifacts.update(trajectory=traj, estimate=res)
    exp = sc.expected()
    final = m["final_zeta_error"]
    if exp.get("max_final_zeta_error") is not None:
        out.check("final zeta error <=", exp["max_final_zeta_error"], final,
                  ok=final is not None and final <= exp["max_final_zeta_error"])
    if exp.get("min_final_zeta_error") is not None:
        out.check("final zeta error >", exp["min_final_zeta_error"], final,
                  ok=final is not None and final > exp["min_final_zeta_error"])
    if "converging" in exp:
        conv = (m["zeta_circular_rmse_final_20pct"] < m["zeta_circular_rmse_first_20pct"])
        out.check("converging trend", exp["converging"], conv)
    lines = [f"Scenario {sc.name}: final |zeta_hat - zeta| = "
             f"{'n/a' if final is None else f'{final:.4f}'} rad "
             f"(final-20% circular rmse {m['zeta_circular_rmse_final_20pct']:.4f})",
             "  local estimate only: convergence depends on excitation and initial guess"]
    lines += ["  " + s for s in out.check_lines()]
    if m["diverged"]:
        out.error = f"filter diverged at t={m['failure_time']}"
        lines.append("  " + out.error)
        out.exit_code = 5
    elif any(not c.ok for c in out.checks):
        out.exit_code = 3
    out.report = "\n".join(lines) + "\n"
    return out


def kind_of(sc: Scenario) -> str:
    group = sc["scenario"]["group"]
    if group.startswith("figure3"):
        return "filter"
    if group.startswith("figure2"):
        return "simulate"
    return "analyze"


def run(sc: Scenario, kind: str | None = None, **kw) -> Outcome:
    kind = kind or kind_of(sc)
    if kind == "analyze":
        return run_analysis(sc, kw.get("workers", 1))
    if kind == "simulate":
        return run_simulation(sc, kw.get("seed"))
    return run_filter_scenario(sc, kw.get("seed"))


def outcome_json(out: Outcome) -> str:
    doc = dict(out.results)
    doc["checks"] = [{"item": c.item, "expected": c.expected, "actual": c.actual,
                      "status": c.status} for c in out.checks]
    doc["error"] = out.error
    return json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, tuple):
        return list(v)
    raise TypeError(type(v).__name__)
