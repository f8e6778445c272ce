import json

import numpy as np
import pytest

from windobs.expr import Const, evaluate, simplify
from windobs.models import StateConfig, build_dynamics, build_sensors
from windobs.observability import (
    Algebra, SingularEvaluation, algebra_paths, build_algebra, independent_rows,
    jacobian_at, lie_derivative, numeric_rank, observability_map, prime_point, rank_at,
    redundancy_check, state_observable,
)


@pytest.fixture(scope="module")
def calibrated():
    m = build_dynamics(StateConfig())
    return m, build_sensors("calibrated-vision", m)


def test_lie_derivative_examples(calibrated):
    m, h = calibrated
    S = m.sym
    assert lie_derivative([S("phi")], m.f0, m.states) == [S("phidot")]
    assert lie_derivative([Const(4)], m.f0, m.states)[0] == Const(0)
    got = lie_derivative([h.h[2]], m.f0, m.states)[0]
    p = prime_point(m.states)
    vq, vp, pd = p[S("v_par")], p[S("v_perp")], p[S("phidot")]
    assert evaluate(got, p) == pytest.approx(-pd - vp ** 2 * pd / vq ** 2, rel=1e-14)


def test_algebra_sizes_and_labels(calibrated):
    m, h = calibrated
    assert len(build_algebra(m, h)) == 6
    alg = build_algebra(m, h, ["u_par"])
    assert len(alg) == 9
    assert alg.exprs[:3] == list(h.h)
    assert alg.labels[3].startswith("Lf0 h[0]")
    assert alg.labels[8] == "Lf_par h[2]"
    assert algebra_paths(["u_par", "u_perp"], 2) == [
        (), ("f0",), ("u_par",), ("u_perp",), ("f0", "f0"), ("f0", "u_par"), ("f0", "u_perp")]
    assert ("u_par", "f0") in algebra_paths(["u_par"], 2, cross_terms=True)


def test_prime_point():
    m = build_dynamics(StateConfig())
    p = prime_point(m.states)
    assert [p[s] for s in m.states] == [2, 3, 5, 7, 11, 13]
    assert prime_point(m.states, {m.sym("phidot"): 0})[m.sym("phidot")] == 0.0
    with pytest.raises(KeyError):
        prime_point(m.states[:2], {m.sym("w"): 1.0})


def test_table1_ranks(calibrated):
    m, h = calibrated
    p = prime_point(m.states)
    assert rank_at(build_algebra(m, h), p).rank == 4
    for c in ("u_par", "u_perp"):
        r = rank_at(build_algebra(m, h, [c]), p)
        assert r.rank == 6 and r.fully_observable
    assert independent_rows(build_algebra(m, h, ["u_par"]), p) == [1, 2, 3, 4, 8, 9]


def test_augmentation_with_compound_query(calibrated):
    m, _ = calibrated
    h = build_sensors("calibrated-vision", m, phidot_variant=True)
    alg = build_algebra(m, h, ["u_par"])
    p = prime_point(m.states)
    S = m.sym
    assert state_observable(alg, p, simplify(S("phi") - S("zeta")))
    assert not state_observable(alg, p, S("zeta"))


def test_numeric_jacobian_matches_finite_differences(calibrated):
    m, h = calibrated
    alg = build_algebra(m, h, ["u_par"], order=2)
    p = prime_point(m.states)
    J = jacobian_at(alg, p)
    for j, s in enumerate(m.states):
        step = 1e-6 * abs(p[s])
        hi, lo = dict(p), dict(p)
        hi[s] += step
        lo[s] -= step
        fd = (np.array([evaluate(e, hi) for e in alg.exprs])
              - np.array([evaluate(e, lo) for e in alg.exprs])) / (2 * step)
        scale = np.maximum(1.0, np.abs(J[:, j]))
        assert np.all(np.abs(J[:, j] - fd) <= 1e-5 * scale)


def test_rank_invariances(calibrated):
    m, h = calibrated
    alg = build_algebra(m, h, ["u_par"])
    p = prime_point(m.states, {m.sym("phidot"): 0, m.sym("v_perp"): 0})
    base = rank_at(alg, p).rank
    rng = np.random.default_rng(0)
    perm = Algebra([alg.entries[i] for i in rng.permutation(len(alg))], alg.vars)
    assert rank_at(perm, p).rank == base
    dup = alg.extended(alg.entries[:4])
    assert rank_at(dup, p).rank == base
    grown = rank_at(build_algebra(m, h), p).rank
    assert grown <= base


def test_full_rank_implies_every_state_observable(calibrated):
    m, h = calibrated
    alg = build_algebra(m, h, ["u_par"])
    p = prime_point(m.states)
    assert rank_at(alg, p).fully_observable
    assert all(state_observable(alg, p, s) for s in m.states)


def test_report_is_deterministic_and_serializes(calibrated):
    m, h = calibrated
    alg = build_algebra(m, h, ["u_par"])
    p = prime_point(m.states)
    a = rank_at(alg, p, [("zeta", m.sym("zeta"))])
    b = rank_at(alg, p, [("zeta", m.sym("zeta"))])
    assert a.to_json() == b.to_json()
    doc = json.loads(a.to_json())
    assert doc["rank"] == 6 and doc["queries"] == [{"query": "zeta", "observable": True}]
    assert doc["point"]["zeta"] == 13.0


def test_singular_points_are_reported(calibrated):
    m, h = calibrated
    alg = build_algebra(m, h, ["u_par"])
    S = m.sym
    hover = prime_point(m.states, {S("v_par"): 0, S("v_perp"): 0})
    with pytest.raises(SingularEvaluation):
        rank_at(alg, hover)
    reports = observability_map(alg, prime_point(m.states),
                                [{S("v_par"): 0, S("v_perp"): 0},
                                 {S("v_perp"): 0, S("phidot"): 0}, {}],
                                [("zeta", S("zeta"))], workers=2)
    assert reports[0].error and "undefined" in reports[0].error
    assert reports[1].error is None and reports[1].verdict("zeta") is False
    assert reports[2].verdict("zeta") is True


def test_numeric_rank_threshold():
    # third row is the sum of the first two up to 1e-13; scaling cannot hide that
    J = np.array([[1.0, 2.0, 0.0], [0.0, 1.0, 3.0], [1.0, 3.0, 3.0 + 1e-13]])
    r, sv, thr = numeric_rank(J)
    assert r == 2 and thr == pytest.approx(1e-8 * sv[0] * 3)
    assert numeric_rank(np.diag([1.0, 1e-3, 1e-13]))[0] == 3
    assert numeric_rank(np.zeros((0, 3)))[0] == 0


def test_restricted_second_order_algebra_loses_nothing():
    m = build_dynamics(StateConfig(wind_dynamic=True))
    h = build_sensors("calibrated-vision", m)
    r1, r2 = redundancy_check(m, h, ["u_par"], prime_point(m.states))
    assert r1 == r2 == 8
