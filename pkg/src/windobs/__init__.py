"""Wind-direction observability toolkit.

Symbolic expressions (``expr``), planar flight models (``models``), Lie
algebra rank tests (``observability``), a simulator (``simulator``), a
square-root UKF (``estimator``) and a scenario-driven command line (``cli``).
"""

from .expr import Symbol, SymbolTable, differentiate, evaluate, jacobian, simplify, substitute
from .models import StateConfig, build_dynamics, build_sensors
from .observability import build_algebra, prime_point, rank_at, state_observable

__version__ = "0.1.0"

__all__ = [
    "Symbol", "SymbolTable", "differentiate", "evaluate", "jacobian", "simplify", "substitute",
    "StateConfig", "build_dynamics", "build_sensors",
    "build_algebra", "prime_point", "rank_at", "state_observable",
]
