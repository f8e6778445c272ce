"""Walk through the rank test for the calibrated, drag-free agent.

Without actuation the algebra {h, Lf0 h} only reaches rank 4, so wind
direction is not observable. Adding the forward thrust field lifts the rank
to 6, and the augmentation test confirms zeta individually.
"""

from windobs import build_algebra, build_dynamics, build_sensors, prime_point, rank_at
from windobs import StateConfig, state_observable
from windobs.observability import SingularEvaluation

model = build_dynamics(StateConfig())
sensors = build_sensors("calibrated-vision", model)
point = prime_point(model.states)
zeta = model.sym("zeta")

for controls in ([], ["u_par"], ["u_perp"]):
    algebra = build_algebra(model, sensors, controls)
    report = rank_at(algebra, point)
    label = ", ".join(controls) or "none"
    print(f"controls {label:<10} rows {len(algebra):2d} "
          f"rank {report.rank}/{report.dim}  zeta observable: "
          f"{state_observable(algebra, point, zeta)}")

# hovering makes the optic-flow ratios undefined
hover = prime_point(model.states, {model.sym("v_par"): 0, model.sym("v_perp"): 0})
try:
    rank_at(build_algebra(model, sensors, ["u_par"]), hover)
except SingularEvaluation as exc:
    print(f"hover: {exc}")
