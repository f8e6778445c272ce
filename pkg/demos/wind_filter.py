"""Estimate wind direction with the square-root UKF under changing wind.

Compares many short turns against straight flight. Each run is about 200 s
of simulated flight and takes well under half a minute. The estimate is
local: it converges here because the turns excite the wind states, not
because convergence is guaranteed.
"""

import numpy as np

from windobs import runner
from windobs.scenario import load_scenario, resolve

for name in ("fig3-100turns", "fig3-34turns", "fig3-straight"):
    out = runner.run_filter_scenario(load_scenario(resolve(name)))
    res = out.artifacts["estimate"]
    err = res.zeta_error
    marks = ", ".join(f"t={res.t[i]:5.0f}s {err[i]:.3f}"
                      for i in np.linspace(0, len(err) - 1, 5).astype(int))
    print(f"{name:15s} zeta error: {marks}")
