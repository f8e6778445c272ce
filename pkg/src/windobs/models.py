"""Symbolic dynamics and sensor suites for a planar agent in wind.

The body-frame state is ``[v_par, v_perp, phi, phidot, w, zeta]``; dynamic
wind appends ``[wdot, zetadot]``. Unknown parameters are appended after the
states and given zero dynamics. Known parameters are substituted by value.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .expr import (
    Const, Expr, Symbol, SymbolTable, ZERO, add, cos, div, free_symbols, mul,
    neg, simplify, sin, substitute,
)

BASE_STATES = ("v_par", "v_perp", "phi", "phidot", "w", "zeta")
WIND_RATES = ("wdot", "zetadot")
CONTROLS = ("u_par", "u_perp", "u_phi")
BODY_PARAMS = ("C_par", "C_perp", "C_phi", "m", "I")
MOTOR_PARAMS = ("km1", "km2", "km3", "km4")
SENSOR_PARAMS = tuple(f"ks{i}" for i in range(8))
PARAMETERS = BODY_PARAMS + MOTOR_PARAMS + SENSOR_PARAMS

SENSOR_KINDS = ("calibrated-vision", "uncalibrated-vision", "uncalibrated-inertial")

# gains default to 1, offsets to 0; km2 (wing-damage torque) defaults to 0
DEFAULT_VALUES = {p: 1.0 for p in PARAMETERS}
DEFAULT_VALUES.update(km2=0.0, ks0=0.0, ks3=0.0, ks5=0.0, ks7=0.0)

# what each parameter means once m and I are folded into it
ABSORBED_NAMES = {
    "C_par": "C_par/m", "C_perp": "C_perp/m", "C_phi": "C_phi/I",
    "km1": "km1/m", "km2": "km2/I", "km3": "km3/m", "km4": "km4/I",
}


class IncompatibleConfig(ValueError):
    pass


@dataclass(frozen=True)
class StateConfig:
    """Which states exist and which parameters are unknown.

    ``unknown`` lists parameter names estimated as constant states, in the
    order they are appended to the extended state. Every other parameter is
    substituted from ``values`` (falling back to ``DEFAULT_VALUES``).
    ``absorb_mass`` fixes ``m = I = 1`` so the remaining body and motor
    parameters stand for their ratios with ``m`` or ``I``.
    ``control_states`` lists controls treated as measured states with zero
    dynamics (efferent copies, needed by the inertial sensor).
    """

    drag: bool = False
    wind_dynamic: bool = False
    unknown: tuple[str, ...] = ()
    values: Mapping[str, float] = field(default_factory=dict)
    absorb_mass: bool = False
    control_states: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "unknown", tuple(self.unknown))
        object.__setattr__(self, "control_states", tuple(self.control_states))
        object.__setattr__(self, "values", dict(self.values))
        bad = [p for p in self.unknown if p not in PARAMETERS]
        if bad:
            raise IncompatibleConfig(f"unknown parameter names: {bad}")
        if len(set(self.unknown)) != len(self.unknown):
            raise IncompatibleConfig("duplicate unknown parameters")
        if self.absorb_mass and ({"m", "I"} & set(self.unknown)):
            raise IncompatibleConfig("m and I cannot be unknown when absorbed")
        bad = [c for c in self.control_states if c not in CONTROLS]
        if bad:
            raise IncompatibleConfig(f"not a control: {bad}")

    def value(self, name: str) -> float:
        if self.absorb_mass and name in ("m", "I"):
            return 1.0
        return float(self.values.get(name, DEFAULT_VALUES[name]))

    def state_names(self) -> tuple[str, ...]:
        names = BASE_STATES + (WIND_RATES if self.wind_dynamic else ())
        return names + self.unknown + self.control_states


@dataclass(frozen=True)
class DynamicsModel:
    """Control-affine vector fields ``f0 + u_par f_par + u_perp f_perp + u_phi f_phi``."""

    config: StateConfig
    table: SymbolTable
    states: tuple[Symbol, ...]
    f0: tuple[Expr, ...]
    f_par: tuple[Expr, ...]
    f_perp: tuple[Expr, ...]
    f_phi: tuple[Expr, ...]
    parameters: tuple[Symbol, ...]
    controls: tuple[Symbol, ...]

    def field(self, name: str) -> tuple[Expr, ...]:
        return {"f0": self.f0, "u_par": self.f_par, "u_perp": self.f_perp,
                "u_phi": self.f_phi}[name]

    def xdot(self) -> tuple[Expr, ...]:
        """Full right-hand side with controls left symbolic."""
        u = dict(zip(CONTROLS, self.controls))
        return tuple(
            add(a, mul(u["u_par"], b), mul(u["u_perp"], c), mul(u["u_phi"], d))
            for a, b, c, d in zip(self.f0, self.f_par, self.f_perp, self.f_phi))

    def sym(self, name: str) -> Symbol:
        return self.table.symbol(name)

    def label(self, name: str) -> str:
        if self.config.absorb_mass:
            return ABSORBED_NAMES.get(name, name)
        return name


def _param(cfg: StateConfig, table: SymbolTable, name: str) -> Expr:
    if name in cfg.unknown:
        return table.symbol(name)
    return Const(cfg.value(name))


def airspeed_components(v_par: Expr, v_perp: Expr, phi: Expr, w: Expr,
                        zeta: Expr) -> tuple[Expr, Expr]:
    """Body-frame airspeed ``(a_par, a_perp)`` from ground velocity and wind."""
    rel = add(phi, neg(zeta))
    a_par = add(v_par, neg(mul(w, cos(rel))))
    a_perp = add(v_perp, mul(w, sin(rel)))
    return a_par, a_perp


def build_dynamics(cfg: StateConfig, table: SymbolTable | None = None) -> DynamicsModel:
    table = table if table is not None else SymbolTable()
    v_par, v_perp, phi, phidot, w, zeta = table.symbols(BASE_STATES)
    states = tuple(table.symbol(n) for n in cfg.state_names())
    p = lambda name: _param(cfg, table, name)  # noqa: E731
    m, inertia = p("m"), p("I")

    a_par, a_perp = airspeed_components(v_par, v_perp, phi, w, zeta)
    if cfg.drag:
        d_par = mul(p("C_par"), a_par)
        d_perp = mul(p("C_perp"), a_perp)
        d_phi = mul(p("C_phi"), phidot)
    else:
        d_par = d_perp = d_phi = ZERO

    n = len(states)
    f0 = [ZERO] * n
    f0[0] = add(neg(div(d_par, m)), mul(v_perp, phidot))
    f0[1] = add(neg(div(d_perp, m)), neg(mul(v_par, phidot)))
    f0[2] = phidot
    f0[3] = neg(div(d_phi, inertia))
    if cfg.wind_dynamic:
        f0[4], f0[5] = table.symbols(WIND_RATES)

    f_par, f_perp, f_phi = [ZERO] * n, [ZERO] * n, [ZERO] * n
    f_par[0] = div(p("km1"), m)
    f_par[3] = div(p("km2"), inertia)
    f_perp[1] = div(p("km3"), m)
    f_phi[3] = div(p("km4"), inertia)

    model = DynamicsModel(
        config=cfg, table=table, states=states,
        f0=tuple(simplify(e) for e in f0),
        f_par=tuple(f_par), f_perp=tuple(f_perp), f_phi=tuple(f_phi),
        parameters=tuple(table.symbol(n) for n in cfg.unknown),
        controls=table.symbols(CONTROLS),
    )
    _check_symbols(model, [*model.f0, *model.f_par, *model.f_perp, *model.f_phi])
    return model


def _check_symbols(model: DynamicsModel, exprs: Sequence[Expr]):
    allowed = set(model.states) | set(model.controls)
    for e in exprs:
        stray = free_symbols(e) - allowed
        if stray:
            names = sorted(s.name for s in stray)
            raise IncompatibleConfig(f"expression references undeclared symbols {names}")


@dataclass(frozen=True)
class SensorSet:
    kind: str
    labels: tuple[str, ...]
    h: tuple[Expr, ...]
    phidot_variant: bool = False
    extra: tuple[str, ...] = ()

    def __len__(self):
        return len(self.h)

    def __iter__(self):
        return iter(self.h)


def velocity_rates(model: DynamicsModel) -> tuple[Expr, Expr]:
    """``(vdot_par, vdot_perp)`` as functions of state and controls."""
    u_par, u_perp, _ = model.controls
    vdot_par = add(model.f0[0], mul(u_par, model.f_par[0]))
    vdot_perp = add(model.f0[1], mul(u_perp, model.f_perp[1]))
    return vdot_par, vdot_perp


def build_sensors(kind: str, model: DynamicsModel, phidot_variant: bool = False,
                  extra: Sequence[str] = ()) -> SensorSet:
    """Measurement functions for one sensor suite.

    ``extra`` may contain ``"phidot"`` (adds ``ks6*phidot + ks7``) or
    ``"vision"`` (adds ``ks6*v_perp/v_par + ks7``).
    """
    if kind not in SENSOR_KINDS:
        raise IncompatibleConfig(f"unknown sensor kind {kind!r}")
    cfg, table = model.config, model.table
    v_par, v_perp, phi, phidot, w, zeta = (table.symbol(n) for n in BASE_STATES)
    a_par, a_perp = airspeed_components(v_par, v_perp, phi, w, zeta)
    k = {name: _param(cfg, table, name) for name in SENSOR_PARAMS}
    if kind == "calibrated-vision":
        k = {name: Const(DEFAULT_VALUES[name]) for name in SENSOR_PARAMS}

    def affine(gain, signal, offset=None):
        out = mul(k[gain], signal)
        return add(out, k[offset]) if offset else out

    if phidot_variant:
        first = affine("ks1", phidot, "ks0")
        labels = ["ks1*phidot+ks0"]
    else:
        first = affine("ks1", phi)
        labels = ["ks1*phi"]
    h = [first, affine("ks2", div(a_perp, a_par), "ks3")]
    labels.append("ks2*a_perp/a_par+ks3")

    if kind == "uncalibrated-inertial":
        if not cfg.drag:
            raise IncompatibleConfig("inertial sensors require the drag model")
        vdot_par, vdot_perp = velocity_rates(model)
        h.append(affine("ks4", div(vdot_perp, vdot_par), "ks5"))
        labels.append("ks4*vdot_perp/vdot_par+ks5")
        h.extend(model.controls[:2])
        labels.extend(["u_par", "u_perp"])
    else:
        h.append(affine("ks4", div(v_perp, v_par), "ks5"))
        labels.append("ks4*v_perp/v_par+ks5")

    for ch in extra:
        if ch == "phidot":
            h.append(affine("ks6", phidot, "ks7"))
            labels.append("ks6*phidot+ks7")
        elif ch == "vision":
            h.append(affine("ks6", div(v_perp, v_par), "ks7"))
            labels.append("ks6*v_perp/v_par+ks7")
        else:
            raise IncompatibleConfig(f"unknown extra channel {ch!r}")

    if kind == "calibrated-vision":
        labels = [lab.replace("ks1*", "").replace("+ks0", "").replace("ks2*", "")
                  .replace("+ks3", "").replace("ks4*", "").replace("+ks5", "")
                  for lab in labels]
    h = [simplify(e) for e in h]
    _check_symbols(model, h)
    return SensorSet(kind=kind, labels=tuple(labels), h=tuple(h),
                     phidot_variant=phidot_variant, extra=tuple(extra))


# ---------------------------------------------------------------------------
# query expressions ("zeta", "phi - zeta", ...)

_BINOPS = {ast.Add: add, ast.Sub: lambda a, b: add(a, neg(b)), ast.Mult: mul, ast.Div: div}


def parse_query(text: str, table: SymbolTable) -> Expr:
    """Parse a small arithmetic expression over registered symbol names."""

    def walk(node):
        if isinstance(node, ast.Expression):
            return walk(node.body)
        if isinstance(node, ast.Name):
            if node.id not in table:
                raise IncompatibleConfig(f"query references unknown symbol {node.id!r}")
            return table[node.id]
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return Const(node.value)
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
            return neg(walk(node.operand))
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](walk(node.left), walk(node.right))
        raise IncompatibleConfig(f"unsupported query syntax in {text!r}")

    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise IncompatibleConfig(f"cannot parse query {text!r}: {exc.msg}") from None
    return walk(tree)


def with_values(e: Expr, values: Mapping[Symbol, float]) -> Expr:
    return substitute(e, {k: Const(v) for k, v in values.items()})
