"""Small symbolic algebra layer: immutable expression trees.

Supports exact differentiation, simultaneous substitution, conservative
simplification and compiled numeric evaluation. Constants are kept as
``fractions.Fraction`` when possible and only promoted to ``float`` when a
tree is evaluated.
"""

from __future__ import annotations

import math
from fractions import Fraction
from functools import lru_cache
from numbers import Rational, Real
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Expr", "Const", "Symbol", "Neg", "Add", "Mul", "Div", "Pow", "Sin", "Cos",
    "SymbolTable", "UnboundSymbol", "DivisionByZero",
    "const", "add", "mul", "div", "neg", "power", "sin", "cos",
    "differentiate", "substitute", "evaluate", "simplify", "jacobian",
    "compile_exprs", "free_symbols", "ZERO", "ONE",
]


class UnboundSymbol(KeyError):
    """Raised when evaluation meets a symbol with no value."""

    def __init__(self, name):
        super().__init__(name)
        self.name = name

    def __str__(self):
        return f"unbound symbol {self.name!r}"


class DivisionByZero(ZeroDivisionError):
    """A denominator vanished at the evaluation point."""


_set = object.__setattr__


class Expr:
    __slots__ = ("_hash",)

    def __setattr__(self, name, value):
        raise AttributeError(f"{type(self).__name__} is immutable")

    # arithmetic sugar; all of it goes through the simplifying constructors
    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return add(self, neg(_coerce(other)))

    def __rsub__(self, other):
        return add(_coerce(other), neg(self))

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __pos__(self):
        return self

    def __pow__(self, exponent):
        if not isinstance(exponent, int):
            raise TypeError("only integer powers are supported")
        return power(self, exponent)

    def __hash__(self):
        return self._hash

    def __repr__(self):
        return f"{type(self).__name__}({self})"

    @property
    def children(self) -> tuple:
        return ()

    def is_zero(self) -> bool:
        return isinstance(self, Const) and self.value == 0

    def is_one(self) -> bool:
        return isinstance(self, Const) and self.value == 1


class Const(Expr):
    __slots__ = ("value",)

    def __init__(self, value):
        if isinstance(value, bool):
            value = int(value)
        if isinstance(value, Rational):
            value = Fraction(value)
        elif isinstance(value, Real):
            value = float(value)
            if value.is_integer():
                value = Fraction(int(value))
        else:
            raise TypeError(f"not a real constant: {value!r}")
        _set(self, "value", value)
        _set(self, "_hash", hash(("const", value)))

    __hash__ = Expr.__hash__

    def __eq__(self, other):
        return isinstance(other, Const) and self.value == other.value

    def __str__(self):
        v = self.value
        if isinstance(v, Fraction):
            return str(v.numerator) if v.denominator == 1 else f"({v})"
        return repr(v)


class Symbol(Expr):
    __slots__ = ("name",)

    def __init__(self, name: str):
        if not name or not isinstance(name, str):
            raise ValueError("symbol name must be a non-empty string")
        _set(self, "name", name)
        _set(self, "_hash", hash(("sym", name)))

    __hash__ = Expr.__hash__

    def __eq__(self, other):
        return isinstance(other, Symbol) and self.name == other.name

    def __str__(self):
        return self.name


class _Unary(Expr):
    __slots__ = ("arg",)
    tag = ""

    def __init__(self, arg: Expr):
        _set(self, "arg", arg)
        _set(self, "_hash", hash((self.tag, arg._hash)))

    __hash__ = Expr.__hash__

    def __eq__(self, other):
        return type(other) is type(self) and (self is other or self.arg == other.arg)

    @property
    def children(self):
        return (self.arg,)


class Neg(_Unary):
    __slots__ = ()
    tag = "neg"

    def __str__(self):
        return f"-({self.arg})"


class Sin(_Unary):
    __slots__ = ()
    tag = "sin"

    def __str__(self):
        return f"sin({self.arg})"


class Cos(_Unary):
    __slots__ = ()
    tag = "cos"

    def __str__(self):
        return f"cos({self.arg})"


class _NAry(Expr):
    __slots__ = ("args",)
    tag = ""
    op = ""

    def __init__(self, args: Sequence[Expr]):
        _set(self, "args", tuple(args))
        _set(self, "_hash", hash((self.tag,) + tuple(a._hash for a in self.args)))

    __hash__ = Expr.__hash__

    def __eq__(self, other):
        return type(other) is type(self) and (self is other or self.args == other.args)

    @property
    def children(self):
        return self.args

    def __str__(self):
        return "(" + f" {self.op} ".join(str(a) for a in self.args) + ")"


class Add(_NAry):
    __slots__ = ()
    tag = "add"
    op = "+"


class Mul(_NAry):
    __slots__ = ()
    tag = "mul"
    op = "*"


class Div(Expr):
    __slots__ = ("num", "den")

    def __init__(self, num: Expr, den: Expr):
        _set(self, "num", num)
        _set(self, "den", den)
        _set(self, "_hash", hash(("div", num._hash, den._hash)))

    __hash__ = Expr.__hash__

    def __eq__(self, other):
        return isinstance(other, Div) and (
            self is other or (self.num == other.num and self.den == other.den))

    @property
    def children(self):
        return (self.num, self.den)

    def __str__(self):
        return f"({self.num} / {self.den})"


class Pow(Expr):
    __slots__ = ("base", "exp")

    def __init__(self, base: Expr, exp: int):
        _set(self, "base", base)
        _set(self, "exp", int(exp))
        _set(self, "_hash", hash(("pow", base._hash, self.exp)))

    __hash__ = Expr.__hash__

    def __eq__(self, other):
        return isinstance(other, Pow) and self.exp == other.exp and self.base == other.base

    @property
    def children(self):
        return (self.base,)

    def __str__(self):
        return f"({self.base})^{self.exp}"


ZERO = Const(0)
ONE = Const(1)


def _coerce(value) -> Expr:
    if isinstance(value, Expr):
        return value
    return Const(value)


def const(value) -> Const:
    return Const(value)


class SymbolTable:
    """Registry handing out one ``Symbol`` per name.

    Each model owns its own table, so symbols are never shared implicitly.
    """

    def __init__(self):
        self._symbols: dict[str, Symbol] = {}

    def __call__(self, name: str) -> Symbol:
        return self.symbol(name)

    def symbol(self, name: str) -> Symbol:
        sym = self._symbols.get(name)
        if sym is None:
            sym = self._symbols[name] = Symbol(name)
        return sym

    def symbols(self, names: str | Iterable[str]) -> tuple[Symbol, ...]:
        if isinstance(names, str):
            names = names.split()
        return tuple(self.symbol(n) for n in names)

    def __contains__(self, item):
        name = item.name if isinstance(item, Symbol) else item
        return name in self._symbols

    def __getitem__(self, name: str) -> Symbol:
        return self._symbols[name]

    def __iter__(self):
        return iter(self._symbols.values())

    def __len__(self):
        return len(self._symbols)


# ---------------------------------------------------------------------------
# simplifying constructors


def _split_coeff(e: Expr) -> tuple[Fraction | float, Expr]:
    """Split ``e`` into numeric coefficient and remaining factor."""
    if isinstance(e, Const):
        return e.value, ONE
    if isinstance(e, Neg):
        c, rest = _split_coeff(e.arg)
        return -c, rest
    if isinstance(e, Mul) and isinstance(e.args[0], Const):
        rest = e.args[1:]
        return e.args[0].value, rest[0] if len(rest) == 1 else Mul(rest)
    return 1, e


def _scaled(c, rest: Expr) -> Expr:
    if c == 0:
        return ZERO
    if rest.is_one():
        return Const(c)
    if c == 1:
        return rest
    if c == -1:
        return Neg(rest)
    if isinstance(rest, Mul):
        return Mul((Const(c),) + rest.args)
    return Mul((Const(c), rest))


def add(*terms: Expr) -> Expr:
    """Sum with flattening, constant folding and like-term collection."""
    coeffs: dict[Expr, Fraction | float] = {}
    total = Fraction(0)
    stack = list(reversed(terms))
    while stack:
        t = _coerce(stack.pop())
        if isinstance(t, Add):
            stack.extend(reversed(t.args))
            continue
        if isinstance(t, Neg) and isinstance(t.arg, Add):
            stack.extend(neg(a) for a in reversed(t.arg.args))
            continue
        c, rest = _split_coeff(t)
        if rest.is_one():
            total += c
        else:
            coeffs[rest] = coeffs.get(rest, 0) + c
    out = [_scaled(c, r) for r, c in coeffs.items() if c != 0]
    if total != 0:
        out.append(Const(total))
    if not out:
        return ZERO
    if len(out) == 1:
        return out[0]
    return Add(out)


def neg(e: Expr) -> Expr:
    e = _coerce(e)
    if isinstance(e, Const):
        return Const(-e.value)
    if isinstance(e, Neg):
        return e.arg
    if isinstance(e, Mul) and isinstance(e.args[0], Const):
        return _scaled(-e.args[0].value, e.args[1] if len(e.args) == 2 else Mul(e.args[1:]))
    return Neg(e)


def mul(*factors: Expr) -> Expr:
    """Product with flattening, constant folding and power merging."""
    coeff: Fraction | float = Fraction(1)
    exps: dict[Expr, int] = {}
    stack = list(reversed(factors))
    while stack:
        f = _coerce(stack.pop())
        if isinstance(f, Mul):
            stack.extend(reversed(f.args))
            continue
        if isinstance(f, Neg):
            coeff = -coeff
            stack.append(f.arg)
            continue
        if isinstance(f, Const):
            if f.value == 0:
                return ZERO
            coeff *= f.value
            continue
        base, k = (f.base, f.exp) if isinstance(f, Pow) else (f, 1)
        exps[base] = exps.get(base, 0) + k
    num: list[Expr] = []
    den: list[Expr] = []
    for base, k in exps.items():
        if k > 0:
            num.append(base if k == 1 else Pow(base, k))
        elif k < 0:
            den.append(base if k == -1 else Pow(base, -k))
    body = _product(num)
    if den:
        body = Div(body, _product(den))
    return _scaled(coeff, body)


def _product(factors: list[Expr]) -> Expr:
    if not factors:
        return ONE
    if len(factors) == 1:
        return factors[0]
    return Mul(factors)


def div(num: Expr, den: Expr) -> Expr:
    num, den = _coerce(num), _coerce(den)
    if num.is_zero():
        return ZERO
    if den.is_one():
        return num
    if isinstance(den, Const):
        if den.value == 0:
            raise DivisionByZero("division by the zero constant")
        v = den.value
        return mul(Const(1 / v if isinstance(v, float) else Fraction(1) / v), num)
    if num == den:
        return ONE
    cn, rn = _split_coeff(num)
    cd, rd = _split_coeff(den)
    if cd != 1:
        c = cn / cd
        return _scaled(c, div(rn, rd)) if not rn.is_one() else _scaled(c, Div(ONE, rd))
    if isinstance(rn, Div):
        return div(mul(cn, rn.num), mul(rn.den, rd))
    if isinstance(rd, Div):
        return div(mul(cn, rn, rd.den), rd.num)
    return Div(num, den)


def power(base: Expr, exp: int) -> Expr:
    base = _coerce(base)
    exp = int(exp)
    if exp == 0:
        return ONE
    if exp == 1:
        return base
    if isinstance(base, Const):
        if base.value == 0 and exp < 0:
            raise DivisionByZero("zero raised to a negative power")
        return Const(base.value ** exp)
    if isinstance(base, Pow):
        return power(base.base, base.exp * exp)
    if exp < 0:
        return div(ONE, power(base, -exp))
    return Pow(base, exp)


def sin(arg: Expr) -> Expr:
    arg = _coerce(arg)
    if arg.is_zero():
        return ZERO
    if isinstance(arg, Neg):
        return neg(Sin(arg.arg))
    return Sin(arg)


def cos(arg: Expr) -> Expr:
    arg = _coerce(arg)
    if arg.is_zero():
        return ONE
    if isinstance(arg, Neg):
        return Cos(arg.arg)
    return Cos(arg)


# ---------------------------------------------------------------------------
# calculus


@lru_cache(maxsize=None)
def differentiate(e: Expr, s: Symbol) -> Expr:
    """Partial derivative of ``e`` with respect to ``s``."""
    if isinstance(e, Const):
        return ZERO
    if isinstance(e, Symbol):
        return ONE if e == s else ZERO
    if isinstance(e, Neg):
        return neg(differentiate(e.arg, s))
    if isinstance(e, Add):
        return add(*(differentiate(a, s) for a in e.args))
    if isinstance(e, Mul):
        terms = []
        for i, a in enumerate(e.args):
            d = differentiate(a, s)
            if not d.is_zero():
                terms.append(mul(*e.args[:i], d, *e.args[i + 1:]))
        return add(*terms)
    if isinstance(e, Div):
        dn = differentiate(e.num, s)
        dd = differentiate(e.den, s)
        if dd.is_zero():
            return div(dn, e.den)
        top = add(mul(dn, e.den), neg(mul(e.num, dd)))
        return div(top, power(e.den, 2))
    if isinstance(e, Pow):
        db = differentiate(e.base, s)
        if db.is_zero():
            return ZERO
        return mul(Const(e.exp), power(e.base, e.exp - 1), db)
    if isinstance(e, Sin):
        da = differentiate(e.arg, s)
        return ZERO if da.is_zero() else mul(cos(e.arg), da)
    if isinstance(e, Cos):
        da = differentiate(e.arg, s)
        return ZERO if da.is_zero() else neg(mul(sin(e.arg), da))
    raise TypeError(f"unknown node {type(e).__name__}")


def jacobian(es: Sequence[Expr], ss: Sequence[Symbol]) -> list[list[Expr]]:
    return [[differentiate(e, s) for s in ss] for e in es]


def free_symbols(e: Expr) -> set[Symbol]:
    out: set[Symbol] = set()
    seen: set[int] = set()
    stack = [e]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if isinstance(node, Symbol):
            out.add(node)
        else:
            stack.extend(node.children)
    return out


def _rebuild(e: Expr, fn: Callable[[Expr], Expr], memo: dict) -> Expr:
    """Bottom-up rebuild through the simplifying constructors."""
    key = id(e)
    hit = memo.get(key)
    if hit is not None:
        return hit[1]
    out = fn(e)
    if out is None:
        if isinstance(e, (Const, Symbol)):
            out = e
        elif isinstance(e, Neg):
            out = neg(_rebuild(e.arg, fn, memo))
        elif isinstance(e, Sin):
            out = sin(_rebuild(e.arg, fn, memo))
        elif isinstance(e, Cos):
            out = cos(_rebuild(e.arg, fn, memo))
        elif isinstance(e, Add):
            out = add(*(_rebuild(a, fn, memo) for a in e.args))
        elif isinstance(e, Mul):
            out = mul(*(_rebuild(a, fn, memo) for a in e.args))
        elif isinstance(e, Div):
            out = div(_rebuild(e.num, fn, memo), _rebuild(e.den, fn, memo))
        elif isinstance(e, Pow):
            out = power(_rebuild(e.base, fn, memo), e.exp)
        else:
            raise TypeError(f"unknown node {type(e).__name__}")
    memo[key] = (e, out)  # keep e alive so its id stays unique
    return out


def substitute(e: Expr, bindings: Mapping[Symbol, object]) -> Expr:
    """Replace bound symbols simultaneously; replacements are not revisited."""
    if not bindings:
        return e
    table = {k: _coerce(v) for k, v in bindings.items()}

    def leaf(node):
        if isinstance(node, Symbol):
            return table.get(node, node)
        return None

    return _rebuild(e, leaf, {})


def simplify(e: Expr) -> Expr:
    """Value-preserving cleanup: flatten, fold constants, drop 0 and 1."""
    return _rebuild(e, lambda node: None, {})


# ---------------------------------------------------------------------------
# numeric evaluation


class _Emitter:
    """Turn a DAG of expressions into straight-line Python source."""

    def __init__(self, symbols: Sequence[Symbol]):
        self.index = {s: i for i, s in enumerate(symbols)}
        self.lines: list[str] = []
        self.names: dict[Expr, str] = {}
        self.consts: list[float] = []

    def name(self, e: Expr) -> str:
        got = self.names.get(e)
        if got is not None:
            return got
        if isinstance(e, Symbol):
            if e not in self.index:
                raise UnboundSymbol(e.name)
            out = f"x[{self.index[e]}]"
            self.names[e] = out
            return out
        if isinstance(e, Const):
            out = repr(float(e.value))
            self.names[e] = out
            return out
        if isinstance(e, Neg):
            rhs = f"-{self.name(e.arg)}"
        elif isinstance(e, Sin):
            rhs = f"_sin({self.name(e.arg)})"
        elif isinstance(e, Cos):
            rhs = f"_cos({self.name(e.arg)})"
        elif isinstance(e, Add):
            rhs = " + ".join(self.name(a) for a in e.args)
        elif isinstance(e, Mul):
            rhs = " * ".join(self.name(a) for a in e.args)
        elif isinstance(e, Div):
            rhs = f"{self.name(e.num)} / {self.name(e.den)}"
        elif isinstance(e, Pow):
            b = self.name(e.base)
            rhs = " * ".join([b] * e.exp) if 0 < e.exp <= 4 else f"{b} ** {e.exp}"
        else:
            raise TypeError(f"unknown node {type(e).__name__}")
        out = f"t{len(self.lines)}"
        self.lines.append(f"    {out} = {rhs}")
        self.names[e] = out
        return out


def compile_exprs(es: Sequence[Expr], symbols: Sequence[Symbol],
                  vectorized: bool = False) -> Callable:
    """Compile expressions into ``f(x) -> ndarray`` with ``x`` ordered as ``symbols``.

    Common subexpressions are computed once. A vanishing denominator raises
    ``DivisionByZero``. With ``vectorized=True`` each ``x[i]`` may be an array;
    the result has shape ``(len(es),) + broadcast shape`` and singular entries
    come back as ``inf``/``nan`` instead of raising.
    """
    em = _Emitter(symbols)
    outs = [em.name(e) for e in es]
    src = "def _f(x):\n" + "\n".join(em.lines) + f"\n    return [{', '.join(outs)}]\n"
    if vectorized:
        scope = {"_sin": np.sin, "_cos": np.cos}
    else:
        scope = {"_sin": math.sin, "_cos": math.cos}
    exec(compile(src, "<windobs.expr>", "exec"), scope)
    raw = scope["_f"]
    n = len(es)

    if vectorized:
        def f(x):
            x = [np.asarray(xi, dtype=float) for xi in x]
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                vals = raw(x)
            shape = np.broadcast_shapes(*(xi.shape for xi in x))
            out = np.empty((n,) + shape)
            for i, v in enumerate(vals):
                out[i] = v
            return out
    else:
        def f(x):
            try:
                return np.array(raw(x), dtype=float).reshape(n)
            except ZeroDivisionError as exc:
                raise DivisionByZero(str(exc)) from None

    f.source = src
    return f


@lru_cache(maxsize=4096)
def _compiled_single(e: Expr, symbols: tuple[Symbol, ...]):
    return compile_exprs([e], symbols)


def evaluate(e: Expr, point: Mapping[Symbol, float]) -> float:
    """Numeric value of ``e`` at ``point``."""
    syms = tuple(sorted(free_symbols(e), key=lambda s: s.name))
    missing = [s.name for s in syms if s not in point]
    if missing:
        raise UnboundSymbol(missing[0])
    f = _compiled_single(e, syms)
    return float(f([float(point[s]) for s in syms])[0])
