import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from windobs import expr as E
from oracles import central_difference, naive_eval, random_expr

T = E.SymbolTable()
x, y, z = T.symbols("x y z")
phi, zeta = T.symbols("phi zeta")


def rel_close(a, b, tol):
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def random_point(rng, syms=(x, y, z)):
    return {s: float(rng.uniform(-2, 2)) for s in syms}


# --- symbols and construction


def test_symbols_equal_by_name():
    other = E.SymbolTable()
    assert other.symbol("x") == x
    assert hash(other.symbol("x")) == hash(x)
    assert T.symbol("x") is x


def test_registry_is_explicit():
    fresh = E.SymbolTable()
    assert "x" not in fresh
    with pytest.raises(KeyError):
        fresh["x"]


def test_constants_stay_exact():
    c = E.div(E.const(1), E.const(3))
    assert isinstance(c, E.Const) and c.value == Fraction(1, 3)


def test_trees_are_immutable():
    e = E.add(x, y)
    with pytest.raises(AttributeError):
        e.args = (x,)


def test_pretty_printer_parenthesizes():
    s = str(E.mul(E.add(x, y), z))
    assert "(" in s and "x" in s and "z" in s


# --- differentiate


def test_chain_rule_on_sin():
    d = E.differentiate(E.sin(E.add(phi, E.neg(zeta))), phi)
    p = {phi: 0.3, zeta: 1.1}
    assert E.evaluate(d, p) == pytest.approx(math.cos(0.3 - 1.1), rel=1e-15)


def test_derivative_of_constant_is_zero():
    assert E.differentiate(E.const(7), x) == E.ZERO
    assert E.differentiate(y, x) == E.ZERO


def test_quotient_and_power_rules():
    e = E.div(E.power(x, 3), E.add(E.ONE, y))
    p = {x: 1.5, y: 0.25}
    assert E.evaluate(E.differentiate(e, x), p) == pytest.approx(3 * 1.5 ** 2 / 1.25)
    assert E.evaluate(E.differentiate(e, y), p) == pytest.approx(-(1.5 ** 3) / 1.25 ** 2)


def test_derivatives_match_finite_differences():
    rng = np.random.default_rng(12)
    for _ in range(100):
        e = random_expr(rng, (x, y, z))
        p = random_point(rng)
        s = (x, y, z)[int(rng.integers(3))]
        d = E.evaluate(E.differentiate(e, s), p)
        fd = central_difference(e, s, p)
        assert rel_close(d, fd, 1e-6), (str(e), d, fd)


def test_linearity_product_rule_and_mixed_partials():
    rng = np.random.default_rng(5)
    for _ in range(30):
        e1, e2 = random_expr(rng, (x, y)), random_expr(rng, (x, y))
        p = random_point(rng, (x, y))
        lhs = E.differentiate(E.add(E.mul(E.const(2), e1), E.mul(E.const(-3), e2)), x)
        rhs = 2 * E.evaluate(E.differentiate(e1, x), p) - 3 * E.evaluate(E.differentiate(e2, x), p)
        assert rel_close(E.evaluate(lhs, p), rhs, 1e-9)
        prod = E.evaluate(E.differentiate(E.mul(e1, e2), x), p)
        expect = (E.evaluate(E.differentiate(e1, x), p) * E.evaluate(e2, p)
                  + E.evaluate(e1, p) * E.evaluate(E.differentiate(e2, x), p))
        assert rel_close(prod, expect, 1e-9)
        dxy = E.differentiate(E.differentiate(e1, x), y)
        dyx = E.differentiate(E.differentiate(e1, y), x)
        assert rel_close(E.evaluate(dxy, p), E.evaluate(dyx, p), 1e-9)


# --- substitute / simplify


def test_substitution_is_simultaneous():
    e = E.add(x, E.mul(E.const(10), y))
    out = E.substitute(e, {x: y, y: x})
    assert E.evaluate(out, {x: 1.0, y: 2.0}) == 12.0


def test_substitute_identity_and_arithmetic():
    e = E.mul(x, E.sin(y))
    assert E.substitute(e, {}) == e
    assert E.evaluate(E.substitute(E.add(x, y), {x: 2, y: 3}), {}) == 5.0


def test_simplify_basic_rewrites():
    assert E.simplify(E.Add((E.Mul((x, E.ONE)), E.ZERO))) == x
    assert E.simplify(E.Neg(E.Neg(x))) == x
    assert E.simplify(E.Mul((x, E.ZERO))) == E.ZERO


def test_simplify_preserves_value():
    rng = np.random.default_rng(99)
    for _ in range(100):
        e = random_expr(rng, (x, y, z), depth=5)
        p = random_point(rng)
        s = E.simplify(e)
        assert rel_close(E.evaluate(s, p), E.evaluate(e, p), 1e-12)
        assert E.evaluate(E.simplify(s), p) == E.evaluate(s, p)


def test_compiled_evaluation_matches_tree_walk():
    rng = np.random.default_rng(3)
    for _ in range(50):
        e = random_expr(rng, (x, y, z))
        p = random_point(rng)
        assert rel_close(E.evaluate(e, p), naive_eval(e, p), 1e-12)


# --- evaluate


def test_evaluate_examples():
    vp, vq = T.symbols("v_perp v_par")
    assert E.evaluate(E.div(vp, vq), {vp: 3, vq: 2}) == 1.5


def test_evaluate_errors():
    with pytest.raises(E.UnboundSymbol) as info:
        E.evaluate(E.add(x, y), {x: 1.0})
    assert info.value.name == "y"
    with pytest.raises(E.DivisionByZero):
        E.evaluate(E.div(x, E.add(y, E.neg(z))), {x: 1.0, y: 2.0, z: 2.0})


def test_evaluate_is_deterministic():
    e = E.div(E.sin(x), E.add(E.ONE, E.power(y, 2)))
    p = {x: 0.7, y: -1.3}
    assert E.evaluate(e, p) == E.evaluate(e, p)


def test_vectorized_compile_flags_singular_entries():
    f = E.compile_exprs([E.div(x, y), E.add(x, E.ONE)], [x, y], vectorized=True)
    out = f([np.array([1.0, 2.0]), np.array([0.0, 4.0])])
    assert out.shape == (2, 2)
    assert not np.isfinite(out[0, 0]) and out[0, 1] == 0.5
    assert list(out[1]) == [2.0, 3.0]


# --- jacobian


def test_jacobian_shapes_and_entries():
    J = E.jacobian([phi], [phi, E.SymbolTable().symbol("w")])
    assert J == [[E.ONE, E.ZERO]]
    rng = np.random.default_rng(1)
    es = [random_expr(rng, (x, y, z)) for _ in range(3)]
    J = E.jacobian(es, [x, y, z])
    p = {x: 2.0, y: 3.0, z: 5.0}
    for i, e in enumerate(es):
        for j, s in enumerate((x, y, z)):
            assert rel_close(E.evaluate(J[i][j], p), central_difference(e, s, p), 1e-6)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_property_derivative_of_sum_is_sum_of_derivatives(seed, a, b):
    rng = np.random.default_rng(seed)
    e1, e2 = random_expr(rng, (x, y), 3), random_expr(rng, (x, y), 3)
    p = {x: a, y: b}
    lhs = E.evaluate(E.differentiate(E.add(e1, e2), x), p)
    rhs = E.evaluate(E.differentiate(e1, x), p) + E.evaluate(E.differentiate(e2, x), p)
    assert rel_close(lhs, rhs, 1e-9)
