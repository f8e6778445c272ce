"""Declarative scenario files.

A scenario is an INI file. Every section and key is declared in ``SCHEMA``
with a type, a default and a one-line description; anything else is
rejected with the file name and line number. ``[queries]`` is free-form
(``label = expression``) and ``[expected]`` accepts a few patterned keys
(``augmented_rank.<label>``, ``grid.<label>``).

Value syntax:

* lists are comma separated: ``unknown = C_par, C_perp``
* mappings are ``name=value`` pairs: ``values = km2=0, ks5=1``
* the override grid separates points with ``|``: ``grid = phidot=0 | w=0``
* an empty mapping inside a grid is written ``-``
"""

from __future__ import annotations

import configparser
import io
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

from .models import CONTROLS, PARAMETERS, SENSOR_KINDS

BUNDLED_DIR = Path(__file__).parent / "scenarios"


class ScenarioError(ValueError):
    def __init__(self, message, path=None, line=None):
        where = f"{path}" if path else "<scenario>"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}")
        self.path, self.line = path, line


# ---------------------------------------------------------------------------
# value codecs


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _list(text):
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _floats(text):
    return tuple(float(p) for p in _list(text))


def _number(text):
    f = float(text)
    return int(f) if f.is_integer() and re.fullmatch(r"[+-]?\d+", text.strip()) else f


def _mapping(text):
    out = {}
    for item in _list(text):
        if "=" not in item:
            raise ValueError(f"expected name=value, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        out[k] = _number(v)
    return out


def _grid(text):
    pts = []
    for chunk in text.split("|"):
        chunk = chunk.strip()
        if chunk:
            pts.append({} if chunk == "-" else _mapping(chunk))
    return tuple(pts)


def _fmt_number(v):
    return str(v) if isinstance(v, int) else repr(float(v))


def _fmt_mapping(m):
    return ", ".join(f"{k}={_fmt_number(v)}" for k, v in m.items())


CODECS = {
    "bool": (_bool, lambda v: "true" if v else "false"),
    "int": (int, str),
    "float": (float, lambda v: repr(float(v))),
    "str": (lambda s: s.strip(), str),
    "list": (_list, lambda v: ", ".join(v)),
    "floats": (_floats, lambda v: ", ".join(repr(float(x)) for x in v)),
    "mapping": (_mapping, _fmt_mapping),
    "grid": (_grid, lambda v: " | ".join(_fmt_mapping(p) or "-" for p in v)),
    "optfloat": (lambda s: None if s.strip() in ("", "none") else float(s),
                 lambda v: "none" if v is None else repr(float(v))),
}


# section -> key -> (type, default, description)
SCHEMA: dict[str, dict[str, tuple[str, object, str]]] = {
    "scenario": {
        "name": ("str", "", "identifier used in reports"),
        "description": ("str", "", "free text shown in reports"),
        "group": ("str", "", "reproduce group, e.g. table1, figure2"),
    },
    "model": {
        "drag": ("bool", False, "linear drag on airspeed"),
        "wind_dynamic": ("bool", False, "append wdot, zetadot to the state"),
        "unknown": ("list", (), "parameters estimated as constant states"),
        "values": ("mapping", {}, "values for known parameters (default 1, km2 and offsets 0)"),
        "absorb_mass": ("bool", False, "fold m and I into the other body and motor parameters"),
        "control_states": ("list", (), "controls treated as measured constant states"),
    },
    "sensors": {
        "kind": ("str", "calibrated-vision", "one of " + ", ".join(SENSOR_KINDS)),
        "phidot_variant": ("bool", False, "first channel measures phidot instead of phi"),
        "extra": ("list", (), "extra channels: phidot, vision"),
    },
    "controls": {
        "active": ("list", (), "control fields used in the algebra"),
        "schedule": ("str", "straight", "simulation control preset"),
        "schedule_params": ("mapping", {}, "keyword arguments for the preset"),
    },
    "algebra": {
        "order": ("int", 1, "1 or 2"),
        "cross_terms": ("bool", False, "also add Lfc Lf0 h at order 2"),
        "rel_tol": ("float", 1e-8, "relative singular value threshold"),
    },
    "points": {
        "overrides": ("mapping", {}, "changes to the prime point used as base point"),
        "grid": ("grid", (), "additional override points probed on top of the base point"),
    },
    "simulation": {
        "dt": ("float", 0.01, "time step [s]"),
        "T": ("float", 10.0, "duration [s]"),
        "drag": ("bool", True, "simulate with drag"),
        "params": ("mapping", {}, "body parameter overrides (m, I, C_par, ..., km4)"),
        "x0": ("str", "1, 0, 0, 0", "v_par, v_perp, phi, phidot or 'equilibrium'"),
        "wind": ("str", "constant", "constant, sinusoid or random-walk"),
        "wind_params": ("mapping", {}, "keyword arguments for the wind signal"),
        "noise": ("floats", (0.0,), "measurement noise std, one value or one per channel"),
        "seed": ("int", 0, "noise seed"),
    },
    "filter": {
        "alpha": ("float", 1e-3, "sigma point spread"),
        "beta": ("float", 2.0, "prior distribution parameter"),
        "kappa": ("float", 0.0, "secondary scaling"),
        "r": ("float", 1e-7, "measurement variance (times identity)"),
        "q": ("float", 1e-10, "process variance (times identity)"),
        "init": ("str", "consistent", "consistent (solve from first measurement) or truth"),
        "zeta_offset": ("float", 1.0, "initial zeta error [rad]"),
        "s0": ("floats", (0.5, 0.5, 0.01, 0.01, 0.5, 1.0), "initial square-root covariance diagonal"),
    },
    "expected": {
        "rank": ("int", None, "Jacobian rank at the base point"),
        "dim": ("int", None, "extended state dimension"),
        "fully_observable": ("bool", None, "rank == dim"),
        "observable": ("list", None, "queries expected observable"),
        "unobservable": ("list", None, "queries expected unobservable"),
        "singular": ("bool", None, "base point expected to be singular"),
        "independent_rows": ("list", None, "1-based independent algebra rows"),
        "label": ("str", None, "predicate classifier label"),
        "rank_label": ("str", None, "rank classifier label"),
        "max_final_zeta_error": ("optfloat", None, "upper bound on final circular zeta error"),
        "min_final_zeta_error": ("optfloat", None, "lower bound on final circular zeta error"),
        "converging": ("bool", None, "final-20% zeta rmse below first-20% rmse"),
    },
    "queries": {},
}
PATTERN_KEYS = {"expected": (("augmented_rank.", "int"), ("grid.", "list"))}
FREE_SECTIONS = ("queries",)


def _key_type(section, key):
    if key in SCHEMA[section]:
        return SCHEMA[section][key][0]
    for prefix, typ in PATTERN_KEYS.get(section, ()):
        if key.startswith(prefix) and len(key) > len(prefix):
            return typ
    return None


# ---------------------------------------------------------------------------


@dataclass
class Scenario:
    """Parsed scenario: typed values for every schema key plus free sections."""

    data: dict[str, dict[str, object]] = field(default_factory=dict)
    path: str | None = None

    def __post_init__(self):
        for sec, keys in SCHEMA.items():
            got = self.data.setdefault(sec, {})
            for key, (_, default, _) in keys.items():
                got.setdefault(key, default)

    def __getitem__(self, section):
        return self.data[section]

    def __eq__(self, other):
        return isinstance(other, Scenario) and self.data == other.data

    @property
    def name(self):
        return self.data["scenario"]["name"] or (Path(self.path).stem if self.path else "")

    def queries(self) -> list[tuple[str, str]]:
        return list(self.data["queries"].items())

    def expected(self) -> dict:
        return {k: v for k, v in self.data["expected"].items() if v is not None}

    def to_ini(self) -> str:
        out = io.StringIO()
        for sec in SCHEMA:
            vals = self.data[sec]
            lines = []
            for key, val in vals.items():
                typ = _key_type(sec, key) if sec not in FREE_SECTIONS else "str"
                if sec in SCHEMA and key in SCHEMA[sec] and val == SCHEMA[sec][key][1]:
                    continue
                if val is None:
                    continue
                lines.append(f"{key} = {CODECS[typ][1](val)}")
            if lines:
                out.write(f"[{sec}]\n" + "\n".join(lines) + "\n\n")
        return out.getvalue()

    def save(self, path):
        Path(path).write_text(self.to_ini())


def _line_index(text: str) -> dict[tuple[str, str | None], int]:
    """Line numbers of section headers and keys (for error messages)."""
    where: dict[tuple[str, str | None], int] = {}
    sec = None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.fullmatch(r"\[([^\]]+)\]", line)
        if m:
            sec = m.group(1).strip()
            where.setdefault((sec, None), n)
        elif sec and not raw[:1].isspace():
            key = re.split(r"[=:]", line, 1)[0].strip()
            where.setdefault((sec, key), n)
    return where


def parse_scenario(text: str, path: str | None = None) -> Scenario:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text, source=path or "<scenario>")
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ScenarioError(exc.message.splitlines()[0] if hasattr(exc, "message") else str(exc),
                            path, line) from None
    lines = _line_index(text)
    data: dict[str, dict] = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ScenarioError(f"unknown section [{sec}]; expected one of "
                                + ", ".join(SCHEMA), path, lines.get((sec, None)))
        data[sec] = {}
        for key, raw in cp.items(sec):
            if sec in FREE_SECTIONS:
                data[sec][key] = raw.strip()
                continue
            typ = _key_type(sec, key)
            if typ is None:
                raise ScenarioError(f"unknown key {key!r} in [{sec}]; allowed: "
                                    + ", ".join(SCHEMA[sec]), path, lines.get((sec, key)))
            try:
                data[sec][key] = CODECS[typ][0](raw)
            except ValueError as exc:
                raise ScenarioError(f"bad value for {sec}.{key}: {exc}", path,
                                    lines.get((sec, key))) from None
    sc = Scenario(data, path)
    _validate(sc, lines)
    return sc


def _validate(sc: Scenario, lines):
    def fail(msg, sec, key):
        raise ScenarioError(msg, sc.path, lines.get((sec, key)))

    m = sc["model"]
    for p in m["unknown"]:
        if p not in PARAMETERS:
            fail(f"unknown parameter {p!r}", "model", "unknown")
    for p in m["values"]:
        if p not in PARAMETERS:
            fail(f"value given for unknown parameter name {p!r}", "model", "values")
    for c in tuple(sc["controls"]["active"]) + tuple(m["control_states"]):
        if c not in CONTROLS:
            fail(f"not a control: {c!r}", "controls", "active")
    if sc["sensors"]["kind"] not in SENSOR_KINDS:
        fail(f"unknown sensor kind {sc['sensors']['kind']!r}", "sensors", "kind")
    if sc["algebra"]["order"] not in (1, 2):
        fail("algebra order must be 1 or 2", "algebra", "order")
    if sc["simulation"]["dt"] <= 0:
        fail("dt must be positive", "simulation", "dt")
    for key in ("r", "q"):
        if sc["filter"][key] <= 0:
            fail(f"filter {key} must be positive", "filter", key)


def load_scenario(path) -> Scenario:
    path = str(path)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc.strerror}", path) from None
    return parse_scenario(text, path)


def scenario_dir() -> Path:
    env = os.environ.get("WINDOBS_SCENARIO_DIR")
    return Path(env) if env else BUNDLED_DIR


def resolve(name_or_path) -> Path:
    """A path as given, or the bundled scenario with that name."""
    p = Path(name_or_path)
    if p.exists():
        return p
    for cand in (scenario_dir() / name_or_path, scenario_dir() / f"{name_or_path}.ini"):
        if cand.exists():
            return cand
    raise ScenarioError("no such scenario file or bundled scenario", str(name_or_path))


def bundled() -> list[Path]:
    return sorted(scenario_dir().glob("*.ini"))


def describe_schema() -> str:
    """Annotated listing of every section and key with its default."""
    out = []
    for sec, keys in SCHEMA.items():
        out.append(f"[{sec}]")
        if sec in FREE_SECTIONS:
            out.append("# label = expression over state and parameter names")
        for key, (typ, default, doc) in keys.items():
            shown = "" if default is None else CODECS[typ][1](default)
            out.append(f"# {doc}\n{key} = {shown}")
        for prefix, typ in PATTERN_KEYS.get(sec, ()):
            out.append(f"# {prefix}<query label> ({typ})")
        out.append("")
    return "\n".join(out)
