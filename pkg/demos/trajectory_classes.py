"""Simulate the six bundled motion presets and label each trajectory.

Writes one CSV per preset into ``demo-output/`` (override with argv[1]) so
the runs can be plotted, and prints both classifier verdicts.
"""

import sys
from pathlib import Path

from windobs import runner
from windobs.scenario import load_scenario, resolve
from windobs.simulator import classify_trajectory, rank_classify_trajectory

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo-output")
out.mkdir(exist_ok=True)

for name in ("fig2-straight", "fig2-direction-changes", "fig2-single-turn",
             "fig2-two-turns", "fig2-orbit", "fig2-constant-course-rotation"):
    sc = load_scenario(resolve(name))
    traj = runner.simulate(sc)
    traj.to_csv(out / f"{name}.csv")
    print(f"{name:32s} predicate: {classify_trajectory(traj):28s} "
          f"rank test: {rank_classify_trajectory(traj)}")
