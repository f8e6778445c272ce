"""Observability Lie algebras and numeric rank tests.

An algebra is the list of sensor functions together with iterated Lie
derivatives along the drift and control vector fields. Local observability at
a point is decided by the rank of the algebra's Jacobian with respect to the
extended state; a single state (or any expression of the state) is
observable when appending it leaves that rank unchanged.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .expr import (
    DivisionByZero, Expr, Symbol, add, compile_exprs, differentiate, free_symbols, mul,
)
from .models import CONTROLS, DynamicsModel, SensorSet

FIELDS = ("f0",) + CONTROLS
DEFAULT_REL_TOL = 1e-8


class SingularEvaluation(ArithmeticError):
    """The algebra cannot be evaluated at the requested point."""

    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


def lie_derivative(hs: Sequence[Expr], f: Sequence[Expr], vars: Sequence[Symbol]) -> list[Expr]:
    if len(f) != len(vars):
        raise ValueError(f"vector field has {len(f)} rows for {len(vars)} variables")
    active = [(v, fj) for v, fj in zip(vars, f) if not fj.is_zero()]
    out = []
    for h in hs:
        syms = free_symbols(h)
        terms = [mul(differentiate(h, v), fj) for v, fj in active if v in syms]
        out.append(add(*terms))
    return out


def _path_label(path: tuple[str, ...]) -> str:
    return " ".join(f"L{'f0' if p == 'f0' else p.replace('u_', 'f_')}" for p in path)


@dataclass
class Algebra:
    entries: list[tuple[str, Expr]]
    vars: tuple[Symbol, ...]

    def __len__(self):
        return len(self.entries)

    @property
    def labels(self) -> list[str]:
        return [lab for lab, _ in self.entries]

    @property
    def exprs(self) -> list[Expr]:
        return [e for _, e in self.entries]

    def extended(self, extra: Iterable[tuple[str, Expr]]) -> "Algebra":
        return Algebra(self.entries + list(extra), self.vars)


def algebra_paths(controls: Sequence[str], order: int = 1,
                  cross_terms: bool = False) -> list[tuple[str, ...]]:
    """Derivation paths in build order; a path lists fields outermost first."""
    bad = [c for c in controls if c not in CONTROLS]
    if bad:
        raise ValueError(f"not a control: {bad}")
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    paths: list[tuple[str, ...]] = [(), ("f0",)] + [(c,) for c in controls]
    if order == 2:
        paths += [("f0", "f0")] + [("f0", c) for c in controls]
        if cross_terms:
            paths += [(c, "f0") for c in controls]
    return paths


def build_algebra(model: DynamicsModel, sensors: SensorSet | Sequence[Expr],
                  controls: Sequence[str] = (), order: int = 1, cross_terms: bool = False,
                  paths: Sequence[tuple[str, ...]] | None = None) -> Algebra:
    """Assemble ``{h, Lf0 h, Lfc h, ...}``.

    ``order=2`` appends ``Lf0 Lf0 h`` and ``Lf0 Lfc h``; ``cross_terms`` also
    appends ``Lfc Lf0 h``. An explicit ``paths`` list overrides all three.
    """
    h = list(sensors.h if isinstance(sensors, SensorSet) else sensors)
    labels = list(sensors.labels) if isinstance(sensors, SensorSet) else [str(e) for e in h]
    if paths is None:
        paths = algebra_paths(controls, order, cross_terms)
    cache: dict[tuple[str, ...], list[Expr]] = {(): h}

    def derive(path):
        if path not in cache:
            inner = derive(path[1:])
            cache[path] = lie_derivative(inner, model.field(path[0]), model.states)
        return cache[path]

    entries = []
    for path in paths:
        prefix = _path_label(path)
        for i, e in enumerate(derive(tuple(path))):
            entries.append((f"{prefix} h[{i}]".strip() if prefix else f"h[{i}] {labels[i]}", e))
    return Algebra(entries, tuple(model.states))


PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71,
          73, 79, 83, 89, 97, 101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151)


def prime_point(vars: Sequence[Symbol], overrides: Mapping[Symbol, float] | None = None
                ) -> dict[Symbol, float]:
    """Assign the k-th prime to the k-th variable, then apply overrides."""
    if len(vars) > len(PRIMES):
        raise ValueError("too many variables for the prime table")
    point = {v: float(p) for v, p in zip(vars, PRIMES)}
    for k, val in (overrides or {}).items():
        if k not in point:
            raise KeyError(f"override for {k} which is not an algebra variable")
        point[k] = float(val)
    return point


@dataclass
class RankReport:
    rank: int
    dim: int
    rows: int
    point: dict[str, float]
    singular_values: list[float]
    threshold: float
    queries: list[tuple[str, bool]] = field(default_factory=list)
    error: str | None = None

    @property
    def fully_observable(self) -> bool:
        return self.error is None and self.rank == self.dim

    @property
    def gap(self) -> float:
        """Ratio between smallest retained and largest discarded singular value."""
        sv = self.singular_values
        if self.rank == 0 or self.rank >= len(sv):
            return float("inf")
        lo = sv[self.rank]
        return float("inf") if lo == 0 else sv[self.rank - 1] / lo

    def verdict(self, query: str) -> bool:
        for q, ok in self.queries:
            if q == query:
                return ok
        raise KeyError(query)

    def to_dict(self) -> dict:
        return {
            "rank": self.rank, "dim": self.dim, "rows": self.rows,
            "fully_observable": self.fully_observable,
            "queries": [{"query": q, "observable": ok} for q, ok in self.queries],
            "point": self.point,
            "diagnostics": {"singular_values": self.singular_values,
                            "threshold": self.threshold,
                            "gap": None if not np.isfinite(self.gap) else self.gap},
            "error": self.error,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def equilibrate(J: np.ndarray) -> np.ndarray:
    """Scale rows, then columns, to unit 2-norm; zero lines stay zero."""
    J = np.asarray(J, dtype=float)
    r = np.linalg.norm(J, axis=1)
    J = J / np.where(r > 0, r, 1.0)[:, None]
    c = np.linalg.norm(J, axis=0)
    return J / np.where(c > 0, c, 1.0)[None, :]


def numeric_rank(J: np.ndarray, rel: float = DEFAULT_REL_TOL) -> tuple[int, np.ndarray, float]:
    """SVD rank of the equilibrated matrix with a relative threshold."""
    if J.size == 0:
        return 0, np.zeros(0), 0.0
    sv = np.linalg.svd(equilibrate(J), compute_uv=False)
    thresh = rel * (sv[0] if sv.size else 0.0) * max(J.shape)
    return int(np.sum(sv > thresh)), sv, thresh


class _JacobianEvaluator:
    """Compiled Jacobian of a list of expressions; cached per algebra."""

    def __init__(self, exprs: Sequence[Expr], vars: Sequence[Symbol]):
        self.vars = tuple(vars)
        others = set()
        for e in exprs:
            others |= free_symbols(e)
        self.extra = tuple(sorted(others - set(self.vars), key=lambda s: s.name))
        entries = [differentiate(e, v) for e in exprs for v in self.vars]
        self.shape = (len(exprs), len(self.vars))
        self.fn = compile_exprs(entries, self.vars + self.extra)

    def __call__(self, point: Mapping[Symbol, float]) -> np.ndarray:
        x = []
        for s in self.vars + self.extra:
            if s not in point:
                raise SingularEvaluation(f"no value for {s.name}")
            x.append(float(point[s]))
        return self.fn(x).reshape(self.shape)


_EVAL_CACHE: dict[tuple, _JacobianEvaluator] = {}


def _evaluator(exprs: Sequence[Expr], vars: Sequence[Symbol]) -> _JacobianEvaluator:
    key = (tuple(exprs), tuple(vars))
    ev = _EVAL_CACHE.get(key)
    if ev is None:
        ev = _EVAL_CACHE[key] = _JacobianEvaluator(exprs, vars)
    return ev


def jacobian_at(algebra: Algebra, point: Mapping[Symbol, float]) -> np.ndarray:
    try:
        J = _evaluator(algebra.exprs, algebra.vars)(point)
    except DivisionByZero as exc:
        raise SingularEvaluation(f"unobservable at this point: sensor undefined ({exc})",
                                 point) from None
    if not np.all(np.isfinite(J)):
        raise SingularEvaluation("unobservable at this point: non-finite Jacobian", point)
    return J


def _control_defaults(point: Mapping[Symbol, float], algebra: Algebra) -> dict:
    # controls that are not states only show up in inertial sensors; bind them to 1
    full = dict(point)
    for e in algebra.exprs:
        for s in free_symbols(e):
            if s not in full and s.name in CONTROLS:
                full[s] = 1.0
    return full


def rank_at(algebra: Algebra, point: Mapping[Symbol, float],
            queries: Sequence[tuple[str, Expr]] = (), rel: float = DEFAULT_REL_TOL
            ) -> RankReport:
    """Rank of the algebra Jacobian at ``point`` plus augmentation verdicts."""
    point = _control_defaults(point, algebra)
    J = jacobian_at(algebra, point)
    rank, sv, thresh = numeric_rank(J, rel)
    report = RankReport(rank=rank, dim=len(algebra.vars), rows=J.shape[0],
                        point={s.name: float(v) for s, v in point.items()},
                        singular_values=[float(s) for s in sv], threshold=float(thresh))
    for name, q in queries:
        report.queries.append((name, _augmented_rank(algebra, point, q, J, rel) == rank))
    return report


def _augmented_rank(algebra, point, query, J, rel):
    row = _evaluator([query], algebra.vars)(point)
    return numeric_rank(np.vstack([J, row]), rel)[0]


def state_observable(algebra: Algebra, point: Mapping[Symbol, float], query: Expr,
                     rel: float = DEFAULT_REL_TOL) -> bool:
    point = _control_defaults(point, algebra)
    J = jacobian_at(algebra, point)
    rank = numeric_rank(J, rel)[0]
    try:
        return _augmented_rank(algebra, point, query, J, rel) == rank
    except DivisionByZero as exc:
        raise SingularEvaluation(str(exc), point) from None


def augmented_ranks(algebra: Algebra, point: Mapping[Symbol, float], query: Expr,
                    rel: float = DEFAULT_REL_TOL) -> tuple[int, int]:
    """``(rank(Jac(O)), rank(Jac({O; query})))`` at ``point``."""
    point = _control_defaults(point, algebra)
    J = jacobian_at(algebra, point)
    return numeric_rank(J, rel)[0], _augmented_rank(algebra, point, query, J, rel)


def independent_rows(algebra: Algebra, point: Mapping[Symbol, float],
                     rel: float = DEFAULT_REL_TOL) -> list[int]:
    """1-based indices of rows that raise the rank when added in order."""
    J = jacobian_at(algebra, _control_defaults(point, algebra))
    kept: list[int] = []
    rank = 0
    for i in range(J.shape[0]):
        r = numeric_rank(J[kept + [i]], rel)[0]
        if r > rank:
            kept.append(i)
            rank = r
    return [i + 1 for i in kept]


def observability_map(algebra: Algebra, base_point: Mapping[Symbol, float],
                      overrides: Sequence[Mapping[Symbol, float]],
                      queries: Sequence[tuple[str, Expr]] = (), workers: int = 1,
                      rel: float = DEFAULT_REL_TOL) -> list[RankReport]:
    """Rank reports over a list of override points, in input order.

    Singular points yield a report with ``error`` set instead of raising.
    """

    def one(ov):
        point = dict(base_point)
        point.update(ov)
        try:
            return rank_at(algebra, point, queries, rel)
        except SingularEvaluation as exc:
            return RankReport(rank=0, dim=len(algebra.vars), rows=len(algebra),
                              point={s.name: float(v) for s, v in point.items()},
                              singular_values=[], threshold=0.0,
                              queries=[(name, False) for name, _ in queries],
                              error=str(exc))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, overrides))
    return [one(ov) for ov in overrides]


def redundancy_check(model: DynamicsModel, sensors: SensorSet, controls: Sequence[str],
                     point: Mapping[Symbol, float], rel: float = DEFAULT_REL_TOL
                     ) -> tuple[int, int]:
    """Ranks of the restricted second-order algebra and of the one with every
    pairwise cross term; equal ranks mean the extra terms add nothing."""
    restricted = build_algebra(model, sensors, controls, order=2)
    first = [(), ("f0",)] + [(c,) for c in controls]
    full_paths = list(first)
    for outer in ("f0",) + tuple(controls):
        for inner in first[1:]:
            full_paths.append((outer,) + inner)
    full = build_algebra(model, sensors, paths=full_paths)
    r1 = rank_at(restricted, point, rel=rel).rank
    r2 = rank_at(full, point, rel=rel).rank
    return r1, r2
