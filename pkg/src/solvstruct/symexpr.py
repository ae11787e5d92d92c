"""Immutable symbolic expressions over named real coordinates.

The canonical form is "sums of products": products distribute over sums,
small integer powers of sums are expanded, numeric constants merge as exact
rationals (falling back to floats when they stop being representable), and
terms/factors carry a fixed total order so that equal values are equal trees.

Zero-testing is layered: `is_zero` first tries the canonical/rational route
(a proof), then falls back to evaluation at a fixed-seed batch of random
points.  The numeric tier is what downstream verdicts call "numerically
zero"; it is a certificate, not a proof, and callers that need proofs check
for the proven tier explicitly.
"""

from __future__ import annotations

import enum
import math
import random
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Sequence, Union

__all__ = [
    "Expression", "Num", "Sym", "Add", "Mul", "Pow", "Fn",
    "ZERO", "ONE", "MINUS_ONE",
    "num", "sym", "add", "mul", "pow_", "fn", "quotient",
    "parse", "differentiate", "evaluate", "evaluate_exact", "substitute",
    "free_symbols", "simplify", "together", "is_zero", "Verdict",
    "is_polynomial_in", "compile_scalar", "compile_vector", "to_text",
    "ExpressionError", "ParseError", "EvaluationError", "DomainError",
    "ZERO_TEST_POINTS", "ZERO_TEST_TOL", "ZERO_TEST_SEED",
]

Rational = Fraction
Real = Union[int, float, Fraction]

# is_zero defaults: number of sample points, absolute tolerance, RNG seed.
ZERO_TEST_POINTS = 32
ZERO_TEST_TOL = 1e-10
ZERO_TEST_SEED = 9001
# |value| above this at any sample point is taken as a nonzero witness.
NONZERO_WITNESS = 1e-6

_F0 = Fraction(0)
_F1 = Fraction(1)
_FHALF = Fraction(1, 2)

# Rationals whose total bit length exceeds this degrade to floats.
_RATIONAL_BITS_CAP = 512
# Integer powers of sums expand only when the term-count estimate stays small.
_EXPAND_POW_CAP = 8
_EXPAND_TERMS_CAP = 3000

FUNCTIONS = ("sin", "cos", "tan", "atan", "ln", "exp")


class ExpressionError(Exception):
    pass


class ParseError(ExpressionError):
    pass


class EvaluationError(ExpressionError):
    pass


class DomainError(EvaluationError):
    pass


class _Inexact(Exception):
    """Internal: exact evaluation hit an irrational operation."""


def _normalize_number(v: Real) -> Union[Fraction, float]:
    if isinstance(v, bool):
        raise ExpressionError("boolean is not a number")
    if isinstance(v, int):
        v = Fraction(v)
    if isinstance(v, Fraction):
        if v.numerator.bit_length() + v.denominator.bit_length() > _RATIONAL_BITS_CAP:
            return float(v)
        return v
    if isinstance(v, float):
        return v
    raise ExpressionError(f"cannot use {type(v).__name__} as a numeric constant")


def _nadd(a, b):
    if isinstance(a, Fraction) and isinstance(b, Fraction):
        return _normalize_number(a + b)
    return float(a) + float(b)


def _nmul(a, b):
    if isinstance(a, Fraction) and isinstance(b, Fraction):
        return _normalize_number(a * b)
    return float(a) * float(b)


def _nzero(a) -> bool:
    return a == 0


class Expression:
    """Base class; all nodes are immutable and hashable."""

    __slots__ = ("_hash", "_key")

    def __eq__(self, other):
        return self is other or (
            type(self) is type(other)
            and self._hash == other._hash
            and self._payload() == other._payload()
        )

    def __hash__(self):
        return self._hash

    def _payload(self):
        raise NotImplementedError

    def sort_key(self):
        k = self._key
        if k is None:
            k = self._make_key()
            object.__setattr__(self, "_key", k)
        return k

    def _make_key(self):
        raise NotImplementedError

    def __str__(self):
        return to_text(self)

    def __repr__(self):
        return f"<expr {to_text(self)}>"

    # arithmetic sugar used pervasively by the geometry modules
    def __add__(self, other):
        return add(self, _coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(MINUS_ONE, _coerce(other)))

    def __rsub__(self, other):
        return add(_coerce(other), mul(MINUS_ONE, self))

    def __mul__(self, other):
        return mul(self, _coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return quotient(self, _coerce(other))

    def __rtruediv__(self, other):
        return quotient(_coerce(other), self)

    def __pow__(self, e):
        return pow_(self, e)

    def __neg__(self):
        return mul(MINUS_ONE, self)


def _coerce(x) -> Expression:
    if isinstance(x, Expression):
        return x
    return num(x)


class Num(Expression):
    __slots__ = ("value",)

    def __init__(self, value):
        object.__setattr__(self, "value", value)
        object.__setattr__(self, "_hash", hash(("num", value)))
        object.__setattr__(self, "_key", None)

    def __setattr__(self, *a):
        raise AttributeError("expressions are immutable")

    def _payload(self):
        # 1 == 1.0 in python; keep exact and float constants distinct
        return (self.value, isinstance(self.value, float))

    def _make_key(self):
        return (0, float(self.value), str(self.value))

    @property
    def is_exact(self):
        return isinstance(self.value, Fraction)


class Sym(Expression):
    __slots__ = ("name",)

    def __init__(self, name: str):
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "_hash", hash(("sym", name)))
        object.__setattr__(self, "_key", None)

    def __setattr__(self, *a):
        raise AttributeError("expressions are immutable")

    def _payload(self):
        return self.name

    def _make_key(self):
        return (1, self.name)


class Fn(Expression):
    __slots__ = ("name", "arg")

    def __init__(self, name: str, arg: Expression):
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "arg", arg)
        object.__setattr__(self, "_hash", hash(("fn", name, arg)))
        object.__setattr__(self, "_key", None)

    def __setattr__(self, *a):
        raise AttributeError("expressions are immutable")

    def _payload(self):
        return (self.name, self.arg)

    def _make_key(self):
        return (2, self.name, self.arg.sort_key())


class Pow(Expression):
    __slots__ = ("base", "exponent")

    def __init__(self, base: Expression, exponent: Fraction):
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "exponent", exponent)
        object.__setattr__(self, "_hash", hash(("pow", base, exponent)))
        object.__setattr__(self, "_key", None)

    def __setattr__(self, *a):
        raise AttributeError("expressions are immutable")

    def _payload(self):
        return (self.base, self.exponent)

    def _make_key(self):
        return (3, self.base.sort_key(), float(self.exponent))


class Mul(Expression):
    __slots__ = ("factors",)

    def __init__(self, factors: tuple):
        object.__setattr__(self, "factors", factors)
        object.__setattr__(self, "_hash", hash(("mul", factors)))
        object.__setattr__(self, "_key", None)

    def __setattr__(self, *a):
        raise AttributeError("expressions are immutable")

    def _payload(self):
        return self.factors

    def _make_key(self):
        return (4,) + tuple(f.sort_key() for f in self.factors)


class Add(Expression):
    __slots__ = ("terms",)

    def __init__(self, terms: tuple):
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "_hash", hash(("add", terms)))
        object.__setattr__(self, "_key", None)

    def __setattr__(self, *a):
        raise AttributeError("expressions are immutable")

    def _payload(self):
        return self.terms

    def _make_key(self):
        return (5,) + tuple(t.sort_key() for t in self.terms)


ZERO = Num(_F0)
ONE = Num(_F1)
MINUS_ONE = Num(Fraction(-1))


def num(v: Real) -> Num:
    v = _normalize_number(v)
    if v == 0 and not isinstance(v, float):
        return ZERO
    if v == 1 and not isinstance(v, float):
        return ONE
    return Num(v)


def sym(name: str) -> Sym:
    return Sym(name)


# ---------------------------------------------------------------------------
# canonicalizing constructors


def _coeff_monomial(e: Expression):
    """Split a canonical non-Add expression into (number, factor tuple)."""
    if isinstance(e, Num):
        return e.value, ()
    if isinstance(e, Mul):
        fs = e.factors
        if isinstance(fs[0], Num):
            return fs[0].value, fs[1:]
        return _F1, fs
    return _F1, (e,)


def _term(coeff, mono: tuple) -> Expression:
    if _nzero(coeff):
        return ZERO
    if not mono:
        return Num(coeff)
    if coeff == 1 and not isinstance(coeff, float):
        return mono[0] if len(mono) == 1 else Mul(mono)
    return Mul((Num(coeff),) + mono)


def _pythagoras(table: dict) -> bool:
    """Merge c*M*sin(u)^2 + c*M*cos(u)^2 -> c*M in a term table, in place."""
    for mono, coeff in list(table.items()):
        if _nzero(coeff):
            continue
        for i, f in enumerate(mono):
            if (isinstance(f, Pow) and f.exponent == 2
                    and isinstance(f.base, Fn) and f.base.name == "sin"):
                partner = mono[:i] + (Pow(Fn("cos", f.base.arg), Fraction(2)),) + mono[i + 1:]
                partner = tuple(sorted(partner, key=lambda x: x.sort_key()))
                other = table.get(partner)
                if other is not None and other == coeff and not _nzero(other):
                    del table[mono]
                    del table[partner]
                    rest = mono[:i] + mono[i + 1:]
                    table[rest] = _nadd(table.get(rest, _F0), coeff)
                    return True
    return False


def add(*parts: Expression) -> Expression:
    table: dict = {}
    stack = list(parts)
    while stack:
        p = stack.pop()
        if isinstance(p, Add):
            stack.extend(p.terms)
            continue
        if isinstance(p, Num):
            if not _nzero(p.value):
                table[()] = _nadd(table.get((), _F0), p.value)
            continue
        coeff, mono = _coeff_monomial(p)
        acc = _nadd(table.get(mono, _F0), coeff)
        if _nzero(acc):
            table.pop(mono, None)
        else:
            table[mono] = acc
    while _pythagoras(table):
        pass
    terms = [_term(c, m) for m, c in table.items() if not _nzero(c)]
    if not terms:
        return ZERO
    if len(terms) == 1:
        return terms[0]
    terms.sort(key=lambda t: t.sort_key())
    return Add(tuple(terms))


def _distribute(scalar_parts: list, sums: list) -> Expression:
    total = 1
    for s in sums:
        total *= len(s.terms)
        if total > _EXPAND_TERMS_CAP:
            return None  # caller keeps factors atomic
    partials = [mul(*scalar_parts)] if scalar_parts else [ONE]
    for s in sums:
        partials = [mul(p, t) for p in partials for t in s.terms]
    return add(*partials)


def mul(*parts: Expression) -> Expression:
    coeff = _F1
    powers: dict = {}
    order: list = []
    sums: list = []
    exp_args: list = []
    stack = list(parts)
    while stack:
        p = stack.pop()
        if isinstance(p, Mul):
            stack.extend(p.factors)
            continue
        if isinstance(p, Num):
            coeff = _nmul(coeff, p.value)
            if _nzero(coeff) and not isinstance(coeff, float):
                return ZERO
            continue
        if isinstance(p, Add):
            sums.append(p)
            continue
        if isinstance(p, Fn) and p.name == "exp":
            exp_args.append(p.arg)
            continue
        if isinstance(p, Pow):
            base, e = p.base, p.exponent
            if (isinstance(base, Add) and e.denominator == 1 and 2 <= e <= _EXPAND_POW_CAP
                    and len(base.terms) ** int(e) <= _EXPAND_TERMS_CAP):
                sums.extend([base] * int(e))
                continue
        else:
            base, e = p, _F1
        if base not in powers:
            order.append(base)
        powers[base] = powers.get(base, _F0) + e

    factors = []
    redo = []
    for base in order:
        e = powers[base]
        if e == 0:
            continue
        pw = pow_(base, e)
        if pw is base or (isinstance(pw, Pow) and pw.base is base):
            factors.append(pw)
        elif isinstance(pw, Num):
            coeff = _nmul(coeff, pw.value)
            if _nzero(coeff) and not isinstance(coeff, float):
                return ZERO
        else:
            redo.append(pw)  # power collection restructured this factor
    if exp_args:
        u = add(*exp_args)
        if u is not ZERO:
            pe = fn("exp", u)
            if isinstance(pe, Fn):
                factors.append(pe)
            else:
                redo.append(pe)

    if redo:
        # restructured pieces may be products/powers again; fold them back in
        return mul(_term(coeff, tuple(sorted(factors, key=lambda f: f.sort_key()))),
                   *redo, *sums)
    if sums:
        scalar = _term(coeff, tuple(sorted(factors, key=lambda f: f.sort_key())))
        out = _distribute([scalar], sums)
        if out is not None:
            return out
        # too large to expand: keep the sums as atomic factors
        allf = sorted(factors + sums, key=lambda f: f.sort_key())
        return _term(coeff, tuple(allf))
    factors.sort(key=lambda f: f.sort_key())
    return _term(coeff, tuple(factors))


def _int_nthroot(x: int, n: int):
    if x < 0:
        return None
    if x in (0, 1):
        return x
    r = round(x ** (1.0 / n))
    for cand in (r - 1, r, r + 1):
        if cand >= 0 and cand ** n == x:
            return cand
    return None


def _num_pow(v, e: Fraction):
    """Exact power of a number when possible, else Pow/float fallback."""
    if isinstance(v, float):
        try:
            return num(float(v) ** float(e))
        except (OverflowError, ValueError):
            raise DomainError(f"cannot raise {v} to power {e}")
    if e.denominator == 1:
        k = int(e)
        if v == 0:
            if k < 0:
                raise EvaluationError("zero to a negative power")
            return ZERO if k > 0 else ONE
        return num(v ** k)
    # rational exponent: exact only for perfect roots
    q = e.denominator
    sign = 1
    base = v
    if v < 0:
        if q % 2 == 1:
            sign, base = -1, -v
        else:
            return Pow(num(v), e)  # evaluation will raise a domain error
    rn = _int_nthroot(base.numerator, q)
    rd = _int_nthroot(base.denominator, q)
    if rn is None or rd is None:
        return Pow(num(v), e)
    val = Fraction(rn, rd) ** e.numerator
    if sign < 0 and e.numerator % 2 == 1:
        val = -val
    return num(val)


def _add_content(e: Add):
    """Return (content, sign, normalized) with e == sign*content*normalized.

    `normalized` has rational-coefficient content 1 and a positive leading
    term; float coefficients confine extraction to the sign.
    """
    coeffs = []
    exact = True
    for t in e.terms:
        c, _ = _coeff_monomial(t)
        coeffs.append(c)
        if isinstance(c, float):
            exact = False
    lead = min(e.terms, key=lambda t: t.sort_key())
    lead_c, _ = _coeff_monomial(lead)
    sign = -1 if lead_c < 0 else 1
    if exact:
        gn = 0
        gd = 1
        for c in coeffs:
            gn = math.gcd(gn, abs(c.numerator))
            gd = (gd * c.denominator) // math.gcd(gd, c.denominator)
        content = Fraction(gn, gd) if gn else _F1
    else:
        content = _F1
    if content == 1 and sign == 1:
        return _F1, 1, e
    scale = Fraction(1, 1) / content * sign
    normalized = add(*[mul(Num(Fraction(scale) if isinstance(scale, Fraction) else scale), t)
                       for t in e.terms])
    return content, sign, normalized


def pow_(base: Expression, exponent) -> Expression:
    base = _coerce(base)
    if isinstance(exponent, Expression):
        if isinstance(exponent, Num) and isinstance(exponent.value, Fraction):
            exponent = exponent.value
        else:
            raise ExpressionError("exponents must be rational constants")
    if isinstance(exponent, float):
        if float(exponent).is_integer():
            exponent = Fraction(int(exponent))
        else:
            exponent = Fraction(exponent).limit_denominator(10 ** 6)
    exponent = Fraction(exponent)
    if exponent == 0:
        return ONE  # includes 0^0 -> 1 by convention
    if exponent == 1:
        return base
    if isinstance(base, Num):
        return _num_pow(base.value, exponent)
    if isinstance(base, Pow):
        if exponent.denominator == 1:
            return pow_(base.base, base.exponent * exponent)
        return Pow(base, exponent)
    if isinstance(base, Fn) and base.name == "exp":
        return fn("exp", mul(Num(exponent), base.arg))
    if isinstance(base, Mul):
        if exponent.denominator == 1:
            return mul(*[pow_(f, exponent) for f in base.factors])
        c, mono = _coeff_monomial(base)
        if not isinstance(c, float) and c > 0 and c != 1:
            return mul(_num_pow(c, exponent), Pow(_term(_F1, mono), exponent))
        return Pow(base, exponent)
    if isinstance(base, Add):
        # flatten embedded denominators: with S = M*S' for a monomial M of
        # negative powers, S^e = M^e * S'^e and S' is denominator-free
        negs: dict = {}
        for t in base.terms:
            _, mono = _coeff_monomial(t)
            for f in mono:
                if isinstance(f, Pow) and f.exponent < 0 and not isinstance(f.base, Num):
                    if f.exponent < negs.get(f.base, _F0):
                        negs[f.base] = f.exponent
        if negs:
            if exponent.denominator == 1:
                extract = negs
            else:
                # fractional powers split safely only over nonnegative factors
                extract = {b: x for b, x in negs.items()
                           if x.denominator == 1 and int(x) % 2 == 0}
            if extract:
                clear = [pow_(b, -x) for b, x in extract.items()]
                inner = add(*[mul(t, *clear) for t in base.terms])
                outer = [pow_(b, x * exponent) for b, x in extract.items()]
                return mul(*outer, pow_(inner, exponent))
        if exponent.denominator == 1 and 2 <= exponent <= _EXPAND_POW_CAP \
                and len(base.terms) ** int(exponent) <= _EXPAND_TERMS_CAP:
            return mul(*[base] * int(exponent))
        content, sign, normalized = _add_content(base)
        if exponent.denominator == 1:
            if content != 1 or sign != 1:
                spow = ONE if int(exponent) % 2 == 0 or sign == 1 else MINUS_ONE
                return mul(_num_pow(content, exponent), spow, Pow(normalized, exponent))
            return Pow(base, exponent)
        if content != 1 and not isinstance(content, float):
            # positive rational content only; the sign stays inside the base
            scaled = add(*[mul(Num(Fraction(1, 1) / content), t) for t in base.terms])
            return mul(_num_pow(content, exponent), Pow(scaled, exponent))
        return Pow(base, exponent)
    return Pow(base, exponent)


def quotient(a, b) -> Expression:
    return mul(_coerce(a), pow_(_coerce(b), Fraction(-1)))


def _is_negative_normal(e: Expression) -> bool:
    if isinstance(e, Num):
        return e.value < 0
    if isinstance(e, Mul):
        return isinstance(e.factors[0], Num) and e.factors[0].value < 0
    if isinstance(e, Add):
        lead = min(e.terms, key=lambda t: t.sort_key())
        return _is_negative_normal(lead)
    return False


_FN_AT_ZERO = {"sin": ZERO, "cos": ONE, "tan": ZERO, "atan": ZERO, "exp": ONE}
_ODD_FUNCTIONS = ("sin", "tan", "atan")


def fn(name: str, arg) -> Expression:
    arg = _coerce(arg)
    if name == "sqrt":
        return pow_(arg, _FHALF)
    if name == "arctan":
        name = "atan"
    if name not in FUNCTIONS:
        raise ExpressionError(f"unsupported function '{name}'")
    if arg is ZERO and name in _FN_AT_ZERO:
        return _FN_AT_ZERO[name]
    if name == "ln":
        if arg is ONE:
            return ZERO
        if isinstance(arg, Fn) and arg.name == "exp":
            return arg.arg
        if isinstance(arg, Pow):
            e = arg.exponent
            if not (e.denominator == 1 and e.numerator % 2 == 0):
                # ln(u^r) = r ln(u) is sign-safe unless r is a (nonzero) even integer
                return mul(Num(e), fn("ln", arg.base))
    if name == "exp":
        # pull out rational multiples of logarithms: exp(r ln u + v) = u^r exp(v)
        terms = arg.terms if isinstance(arg, Add) else (arg,)
        pulled = []
        rest = []
        for t in terms:
            c, mono = _coeff_monomial(t)
            if len(mono) == 1 and isinstance(mono[0], Fn) and mono[0].name == "ln" \
                    and not isinstance(c, float):
                pulled.append(pow_(mono[0].arg, c))
            else:
                rest.append(t)
        if pulled:
            rem = add(*rest) if rest else ZERO
            tail = ONE if rem is ZERO else Fn("exp", rem)
            return mul(*pulled, tail)
    if name in _ODD_FUNCTIONS and _is_negative_normal(arg):
        return mul(MINUS_ONE, fn(name, mul(MINUS_ONE, arg)))
    if name == "cos" and _is_negative_normal(arg):
        return Fn("cos", mul(MINUS_ONE, arg))
    return Fn(name, arg)


# ---------------------------------------------------------------------------
# structural utilities


def free_symbols(e: Expression) -> frozenset:
    if isinstance(e, Sym):
        return frozenset((e.name,))
    if isinstance(e, Num):
        return frozenset()
    if isinstance(e, Fn):
        return free_symbols(e.arg)
    if isinstance(e, Pow):
        return free_symbols(e.base)
    if isinstance(e, Mul):
        out = frozenset()
        for f in e.factors:
            out |= free_symbols(f)
        return out
    if isinstance(e, Add):
        out = frozenset()
        for t in e.terms:
            out |= free_symbols(t)
        return out
    raise ExpressionError(f"unknown node {e!r}")


def substitute(e: Expression, mapping: Mapping[str, Expression]) -> Expression:
    if not mapping:
        return e
    if isinstance(e, Sym):
        r = mapping.get(e.name)
        return e if r is None else _coerce(r)
    if isinstance(e, Num):
        return e
    if isinstance(e, Fn):
        return fn(e.name, substitute(e.arg, mapping))
    if isinstance(e, Pow):
        return pow_(substitute(e.base, mapping), e.exponent)
    if isinstance(e, Mul):
        return mul(*[substitute(f, mapping) for f in e.factors])
    if isinstance(e, Add):
        return add(*[substitute(t, mapping) for t in e.terms])
    raise ExpressionError(f"unknown node {e!r}")


_DIFF_CACHE: dict = {}


def differentiate(e: Expression, name: str) -> Expression:
    """Exact partial derivative with respect to the variable `name`."""
    key = (e, name)
    hit = _DIFF_CACHE.get(key)
    if hit is not None:
        return hit
    if isinstance(e, Num):
        out = ZERO
    elif isinstance(e, Sym):
        out = ONE if e.name == name else ZERO
    elif isinstance(e, Add):
        out = add(*[differentiate(t, name) for t in e.terms])
    elif isinstance(e, Mul):
        fs = e.factors
        pieces = []
        for i, f in enumerate(fs):
            df = differentiate(f, name)
            if df is ZERO:
                continue
            pieces.append(mul(*fs[:i], df, *fs[i + 1:]))
        out = add(*pieces) if pieces else ZERO
    elif isinstance(e, Pow):
        db = differentiate(e.base, name)
        if db is ZERO:
            out = ZERO
        else:
            out = mul(Num(e.exponent), pow_(e.base, e.exponent - 1), db)
    elif isinstance(e, Fn):
        du = differentiate(e.arg, name)
        if du is ZERO:
            out = ZERO
        else:
            u = e.arg
            if e.name == "sin":
                out = mul(fn("cos", u), du)
            elif e.name == "cos":
                out = mul(MINUS_ONE, fn("sin", u), du)
            elif e.name == "tan":
                out = mul(add(ONE, pow_(fn("tan", u), 2)), du)
            elif e.name == "atan":
                out = mul(du, pow_(add(ONE, pow_(u, 2)), -1))
            elif e.name == "ln":
                out = mul(du, pow_(u, -1))
            elif e.name == "exp":
                out = mul(fn("exp", u), du)
            else:  # pragma: no cover
                raise ExpressionError(f"no derivative rule for {e.name}")
    else:
        raise ExpressionError(f"unknown node {e!r}")
    if len(_DIFF_CACHE) > 200000:
        _DIFF_CACHE.clear()
    _DIFF_CACHE[key] = out
    return out


# ---------------------------------------------------------------------------
# evaluation


def evaluate(e: Expression, env: Mapping[str, float]) -> float:
    """Evaluate to an IEEE double at a point; raises on domain violations."""
    if isinstance(e, Num):
        return float(e.value)
    if isinstance(e, Sym):
        try:
            return float(env[e.name])
        except KeyError:
            raise EvaluationError(f"unbound variable '{e.name}'") from None
    if isinstance(e, Add):
        return math.fsum(evaluate(t, env) for t in e.terms)
    if isinstance(e, Mul):
        out = 1.0
        for f in e.factors:
            out *= evaluate(f, env)
        return out
    if isinstance(e, Pow):
        b = evaluate(e.base, env)
        ex = e.exponent
        if b == 0.0 and ex < 0:
            raise EvaluationError("division by zero")
        if b < 0 and ex.denominator != 1:
            raise DomainError("fractional power of a negative number")
        try:
            return b ** float(ex) if ex.denominator != 1 else b ** int(ex)
        except OverflowError:
            raise EvaluationError("overflow in power") from None
    if isinstance(e, Fn):
        v = evaluate(e.arg, env)
        if e.name == "ln":
            if v <= 0:
                raise DomainError("ln of a non-positive number")
            return math.log(v)
        if e.name == "exp":
            try:
                return math.exp(v)
            except OverflowError:
                raise EvaluationError("overflow in exp") from None
        return getattr(math, e.name)(v)
    raise ExpressionError(f"unknown node {e!r}")


def evaluate_exact(e: Expression, env: Mapping[str, Fraction]) -> Fraction:
    """Exact rational evaluation; raises _Inexact on irrational operations."""
    if isinstance(e, Num):
        if isinstance(e.value, float):
            raise _Inexact
        return e.value
    if isinstance(e, Sym):
        try:
            return Fraction(env[e.name])
        except KeyError:
            raise EvaluationError(f"unbound variable '{e.name}'") from None
    if isinstance(e, Add):
        return sum((evaluate_exact(t, env) for t in e.terms), _F0)
    if isinstance(e, Mul):
        out = _F1
        for f in e.factors:
            out *= evaluate_exact(f, env)
        return out
    if isinstance(e, Pow):
        b = evaluate_exact(e.base, env)
        if e.exponent.denominator != 1:
            r = _num_pow(b, e.exponent)
            if isinstance(r, Num) and isinstance(r.value, Fraction):
                return r.value
            raise _Inexact
        k = int(e.exponent)
        if b == 0 and k < 0:
            raise EvaluationError("division by zero")
        return b ** k
    if isinstance(e, Fn):
        v = evaluate_exact(e.arg, env)
        fold = {"sin": (_F0, _F0), "tan": (_F0, _F0), "atan": (_F0, _F0)}
        if e.name in fold and v == 0:
            return _F0
        if e.name == "cos" and v == 0:
            return _F1
        if e.name == "exp" and v == 0:
            return _F1
        if e.name == "ln" and v == 1:
            return _F0
        raise _Inexact
    raise ExpressionError(f"unknown node {e!r}")


# ---------------------------------------------------------------------------
# fraction combination, polynomial helpers


def _split_denominator(t: Expression):
    """Split a term into (numerator factor list, {base: positive exponent})."""
    nums = []
    dens: dict = {}
    factors = t.factors if isinstance(t, Mul) else (t,)
    for f in factors:
        if isinstance(f, Pow) and f.exponent < 0 and not isinstance(f.base, Num):
            dens[f.base] = dens.get(f.base, _F0) + (-f.exponent)
        else:
            nums.append(f)
    return nums, dens


def together(e: Expression) -> Expression:
    """Rewrite as a single quotient with an expanded numerator.

    Denominator factors shared between terms are collected; exact common
    polynomial factors between numerator and denominator are divided out.
    """
    if isinstance(e, (Num, Sym)):
        return e
    if isinstance(e, Fn):
        return fn(e.name, together(e.arg))
    if isinstance(e, Pow):
        return pow_(together(e.base), e.exponent)
    if isinstance(e, Mul):
        out = mul(*[together(f) for f in e.factors])
        if isinstance(out, Add):
            return together(out)
        return out
    if isinstance(e, Add):
        terms = []
        for t in e.terms:
            tt = together(t)
            if isinstance(tt, Add):
                terms.extend(tt.terms)
            elif tt is not ZERO:
                terms.append(tt)
        split = [_split_denominator(t) for t in terms]
        common: dict = {}
        for _, dens in split:
            for b, ex in dens.items():
                if ex > common.get(b, _F0):
                    common[b] = ex
        if not common:
            return add(*terms)
        pieces = []
        for nums, dens in split:
            scale = [pow_(b, common[b] - dens.get(b, _F0)) for b in common
                     if common[b] != dens.get(b, _F0)]
            pieces.append(mul(*nums, *scale))
        numerator = add(*pieces)
        if numerator is ZERO:
            return ZERO
        return _quotient_expr(numerator, common)
    raise ExpressionError(f"unknown node {e!r}")


def _atomize(factor: Expression):
    if isinstance(factor, Pow) and factor.exponent.denominator == 1 and factor.exponent > 0:
        return factor.base, int(factor.exponent)
    return factor, 1


def _poly_dict(e: Expression, atom_index: dict):
    """Expanded expression -> {exponent vector: coeff}; None if not polynomial."""
    out: dict = {}
    terms = e.terms if isinstance(e, Add) else (e,)
    for t in terms:
        coeff, mono = _coeff_monomial(t)
        if not isinstance(coeff, Fraction):
            return None
        vec = [0] * len(atom_index)
        ok = True
        for f in mono:
            a, k = _atomize(f)
            if isinstance(a, Add):
                ok = False
                break
            idx = atom_index.get(a)
            if idx is None:
                ok = False
                break
            vec[idx] += k
        if not ok:
            return None
        key = tuple(vec)
        out[key] = out.get(key, _F0) + coeff
        if out[key] == 0:
            del out[key]
    return out


def _collect_atoms(exprs):
    atoms = []
    seen = set()
    for e in exprs:
        terms = e.terms if isinstance(e, Add) else (e,)
        for t in terms:
            _, mono = _coeff_monomial(t)
            for f in mono:
                a, _k = _atomize(f)
                if isinstance(a, Add):
                    return None
                if a not in seen:
                    seen.add(a)
                    atoms.append(a)
    atoms.sort(key=lambda a: a.sort_key())
    return {a: i for i, a in enumerate(atoms)}


def _poly_divmod(n_dict: dict, d_dict: dict):
    """Single-divisor polynomial division: returns (quotient, remainder)."""
    d_lead = max(d_dict)
    d_lead_c = d_dict[d_lead]
    n = dict(n_dict)
    q: dict = {}
    r: dict = {}
    guard = 0
    while n:
        guard += 1
        if guard > 20000:
            # give up; fold everything left into the remainder
            for k, v in n.items():
                r[k] = r.get(k, _F0) + v
            break
        n_lead = max(n)
        diff = tuple(a - b for a, b in zip(n_lead, d_lead))
        if any(d < 0 for d in diff):
            r[n_lead] = n.pop(n_lead)
            continue
        c = n[n_lead] / d_lead_c
        q[diff] = q.get(diff, _F0) + c
        for mono, dc in d_dict.items():
            key = tuple(a + b for a, b in zip(diff, mono))
            v = n.get(key, _F0) - c * dc
            if v == 0:
                n.pop(key, None)
            else:
                n[key] = v
    return q, r


def _from_poly_dict(d: dict, atoms_by_index: list) -> Expression:
    terms = []
    for vec, c in d.items():
        fs = [pow_(atoms_by_index[i], k) for i, k in enumerate(vec) if k]
        terms.append(mul(Num(c), *fs))
    return add(*terms)


def _quotient_expr(numerator: Expression, common: dict, start: int = 0) -> Expression:
    """Assemble numerator / (product of powers), dividing out what divides.

    Exactly divisible denominator powers cancel; partially divisible ones
    split the quotient as Q / (D/b) + R / D, which keeps results like
    (a*b + c)/b in the reduced form a + c/b.
    """
    common = {b: e for b, e in common.items() if e != 0}
    if numerator is ZERO:
        return ZERO
    if not common:
        return numerator

    def fallback():
        return mul(numerator, *[pow_(b, -e) for b, e in common.items()])

    bases = sorted((b for b in common if common[b] >= 1), key=lambda b: b.sort_key())
    i = start
    while i < len(bases):
        b = bases[i]
        index = _collect_atoms([numerator, b])
        nd = _poly_dict(numerator, index) if index is not None else None
        bd = _poly_dict(b, index) if index is not None else None
        if nd is None or bd is None or not bd:
            return fallback()
        q, r = _poly_divmod(nd, bd)
        if not q:
            i += 1
            continue
        abi = [None] * len(index)
        for a, j in index.items():
            abi[j] = a
        q_expr = _from_poly_dict(q, abi)
        reduced = dict(common)
        reduced[b] -= 1
        if not r:
            return _quotient_expr(q_expr, reduced, 0)
        r_expr = _from_poly_dict(r, abi)
        return add(_quotient_expr(q_expr, reduced, 0),
                   _quotient_expr(r_expr, dict(common), i + 1))
    return fallback()


def simplify(e: Expression) -> Expression:
    """Canonicalize and combine fractions; idempotent."""
    return together(e)


def is_polynomial_in(e: Expression, names) -> bool:
    names = set(names)

    def check(x, inside_ok):
        if isinstance(x, Num):
            return True
        if isinstance(x, Sym):
            return inside_ok or x.name not in names
        if isinstance(x, Fn):
            return check(x.arg, False) if free_symbols(x.arg) & names else True
        if isinstance(x, Pow):
            if free_symbols(x.base) & names:
                return x.exponent.denominator == 1 and x.exponent > 0 and check(x.base, inside_ok)
            return True
        if isinstance(x, (Mul, Add)):
            kids = x.factors if isinstance(x, Mul) else x.terms
            return all(check(k, inside_ok) for k in kids)
        return False

    def check_fn_free(x):
        # functions and negative powers must not involve the names at all
        if isinstance(x, Fn):
            return not (free_symbols(x.arg) & names)
        if isinstance(x, Pow):
            if x.exponent.denominator != 1 or x.exponent < 0:
                return not (free_symbols(x.base) & names)
            return check_fn_free(x.base)
        if isinstance(x, (Mul, Add)):
            kids = x.factors if isinstance(x, Mul) else x.terms
            return all(check_fn_free(k) for k in kids)
        return True

    return check_fn_free(e)


# ---------------------------------------------------------------------------
# zero testing


class Verdict(enum.Enum):
    PROVEN_ZERO = "proven-zero"
    PROVEN_NONZERO = "proven-nonzero"
    NUMERICALLY_ZERO = "numerically-zero"
    UNKNOWN = "unknown"

    @property
    def zero(self) -> bool:
        return self in (Verdict.PROVEN_ZERO, Verdict.NUMERICALLY_ZERO)


def _rational_only(e: Expression) -> bool:
    if isinstance(e, (Num, Sym)):
        return not (isinstance(e, Num) and isinstance(e.value, float))
    if isinstance(e, Fn):
        return False
    if isinstance(e, Pow):
        return e.exponent.denominator == 1 and _rational_only(e.base)
    kids = e.factors if isinstance(e, Mul) else e.terms
    return all(_rational_only(k) for k in kids)


def is_zero(e: Expression, *, points: int = ZERO_TEST_POINTS,
            tol: float = ZERO_TEST_TOL, seed: int = ZERO_TEST_SEED) -> Verdict:
    """Certify whether an expression is identically zero.

    proven-zero requires canonical simplification to reach the zero node;
    numerically-zero requires |e| < tol at `points` random points (fixed
    seed).  A clearly nonzero sample value is reported as proven-nonzero.
    """
    s = simplify(e)
    if s is ZERO:
        return Verdict.PROVEN_ZERO
    if isinstance(s, Num):
        if isinstance(s.value, Fraction):
            return Verdict.PROVEN_NONZERO
        return Verdict.NUMERICALLY_ZERO if abs(s.value) < tol else Verdict.PROVEN_NONZERO
    names = sorted(free_symbols(s))
    rng = random.Random(seed)
    if _rational_only(s):
        for _ in range(8):
            env = {n: Fraction(rng.randint(-60, 60), rng.randint(1, 30)) for n in names}
            try:
                v = evaluate_exact(s, env)
            except (EvaluationError, _Inexact):
                continue
            if v != 0:
                return Verdict.PROVEN_NONZERO
        # exact evaluation kept landing on zeros; fall through to sampling
    good = 0
    worst = 0.0
    attempts = 0
    while good < points and attempts < points * 20:
        attempts += 1
        env = {n: rng.uniform(-2.0, 2.0) for n in names}
        try:
            v = evaluate(s, env)
        except EvaluationError:
            continue
        if not math.isfinite(v):
            continue
        good += 1
        worst = max(worst, abs(v))
        if worst > NONZERO_WITNESS:
            return Verdict.PROVEN_NONZERO
    if good == 0:
        return Verdict.UNKNOWN
    if worst < tol:
        return Verdict.NUMERICALLY_ZERO
    return Verdict.UNKNOWN


# ---------------------------------------------------------------------------
# compilation to fast python callables


def _emit(e: Expression) -> str:
    if isinstance(e, Num):
        if isinstance(e.value, Fraction) and e.value.denominator == 1:
            v = e.value.numerator
            return repr(v) if v >= 0 else f"({v!r})"
        return f"({float(e.value)!r})"
    if isinstance(e, Sym):
        return e.name
    if isinstance(e, Add):
        return "(" + " + ".join(_emit(t) for t in e.terms) + ")"
    if isinstance(e, Mul):
        return "(" + " * ".join(_emit(f) for f in e.factors) + ")"
    if isinstance(e, Pow):
        ex = e.exponent
        es = repr(int(ex)) if ex.denominator == 1 else repr(float(ex))
        return f"({_emit(e.base)}) ** ({es})"
    if isinstance(e, Fn):
        fname = {"ln": "_log"}.get(e.name, "_" + e.name)
        return f"{fname}({_emit(e.arg)})"
    raise ExpressionError(f"unknown node {e!r}")


_COMPILE_GLOBALS = {
    "_sin": math.sin, "_cos": math.cos, "_tan": math.tan,
    "_atan": math.atan, "_log": math.log, "_exp": math.exp,
}


def compile_scalar(e: Expression, names: Sequence[str]) -> Callable[..., float]:
    src = f"lambda {', '.join(names)}: " + _emit(e)
    return eval(src, dict(_COMPILE_GLOBALS))  # noqa: S307 - generated from our own AST


def compile_vector(exprs: Sequence[Expression], names: Sequence[str]):
    body = "(" + ", ".join(_emit(e) for e in exprs) + ("," if len(exprs) == 1 else "") + ")"
    src = f"lambda {', '.join(names)}: " + body
    return eval(src, dict(_COMPILE_GLOBALS))  # noqa: S307


# ---------------------------------------------------------------------------
# parsing


_TOKEN_OPS = set("+-*/^(),")


def _tokenize(text: str):
    tokens = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c in _TOKEN_OPS:
            tokens.append((c, c, i))
            i += 1
            continue
        if c.isdigit() or (c == "." and i + 1 < n and text[i + 1].isdigit()):
            j = i
            seen_dot = seen_exp = False
            while j < n:
                ch = text[j]
                if ch.isdigit():
                    j += 1
                elif ch == "." and not seen_dot and not seen_exp:
                    seen_dot = True
                    j += 1
                elif ch in "eE" and not seen_exp and j + 1 < n and \
                        (text[j + 1].isdigit() or (text[j + 1] in "+-" and j + 2 < n and text[j + 2].isdigit())):
                    seen_exp = True
                    j += 2 if text[j + 1] in "+-" else 1
                else:
                    break
            tokens.append(("num", text[i:j], i))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(("name", text[i:j], i))
            i = j
            continue
        raise ParseError(f"unexpected character {c!r} at position {i}")
    tokens.append(("end", "", n))
    return tokens


_PARSE_FUNCTIONS = {"sin", "cos", "tan", "atan", "arctan", "ln", "exp", "sqrt"}


class _Parser:
    def __init__(self, tokens, variables, bindings):
        self.toks = tokens
        self.pos = 0
        self.variables = variables
        self.bindings = bindings

    def peek(self):
        return self.toks[self.pos]

    def take(self, kind=None):
        t = self.toks[self.pos]
        if kind and t[0] != kind:
            raise ParseError(f"expected {kind} at position {t[2]}, found {t[1]!r}")
        self.pos += 1
        return t

    def parse_expr(self) -> Expression:
        out = self.parse_term()
        while self.peek()[0] in "+-":
            op = self.take()[0]
            rhs = self.parse_term()
            out = add(out, rhs if op == "+" else mul(MINUS_ONE, rhs))
        return out

    def parse_term(self) -> Expression:
        out = self.parse_factor()
        while self.peek()[0] in "*/":
            op = self.take()[0]
            rhs = self.parse_factor()
            out = mul(out, rhs) if op == "*" else quotient(out, rhs)
        return out

    def parse_factor(self) -> Expression:
        if self.peek()[0] == "-":
            self.take()
            return mul(MINUS_ONE, self.parse_factor())
        if self.peek()[0] == "+":
            self.take()
            return self.parse_factor()
        return self.parse_power()

    def parse_power(self) -> Expression:
        base = self.parse_primary()
        if self.peek()[0] == "^":
            tok = self.take()
            exp = self.parse_factor()
            if not isinstance(exp, Num):
                raise ParseError(f"exponent at position {tok[2]} must be a rational constant")
            v = exp.value
            if isinstance(v, float):
                if not v.is_integer():
                    raise ParseError("float exponents must be integral")
                v = Fraction(int(v))
            return pow_(base, v)
        return base

    def parse_primary(self) -> Expression:
        kind, val, pos = self.peek()
        if kind == "(":
            self.take()
            e = self.parse_expr()
            self.take(")")
            return e
        if kind == "num":
            self.take()
            try:
                return num(Fraction(val))
            except (ValueError, ZeroDivisionError):
                return num(float(val))
        if kind == "name":
            self.take()
            if self.peek()[0] == "(":
                if val not in _PARSE_FUNCTIONS:
                    raise ParseError(f"unsupported function '{val}' at position {pos}")
                self.take()
                arg = self.parse_expr()
                self.take(")")
                return fn(val, arg)
            if val in self.bindings:
                return num(self.bindings[val])
            if val in self.variables:
                return Sym(val)
            raise ParseError(f"unknown identifier '{val}' at position {pos}")
        raise ParseError(f"unexpected token {val!r} at position {pos}")


def parse(text: str, variables: Iterable[str],
          bindings: Mapping[str, Real] | None = None) -> Expression:
    """Parse an expression over the chart `variables`.

    `bindings` maps parameter names to numeric values; they are substituted
    during parsing so the result only involves chart variables.
    """
    p = _Parser(_tokenize(text), frozenset(variables), dict(bindings or {}))
    out = p.parse_expr()
    p.take("end")
    return out


# ---------------------------------------------------------------------------
# printing


def _num_text(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if v.denominator == 1:
        return str(v.numerator)
    return f"{v.numerator}/{v.denominator}"


def _needs_parens_as_base(e: Expression) -> bool:
    if isinstance(e, (Add, Mul)):
        return True
    if isinstance(e, Num):
        return e.value < 0 or (isinstance(e.value, Fraction) and e.value.denominator != 1)
    if isinstance(e, Pow):
        return True
    return False


def _pow_text(base: Expression, exponent: Fraction) -> str:
    if exponent < 0:
        return "1/" + _pow_text(base, -exponent) if not isinstance(base, (Add, Mul)) \
            else f"({to_text(base)})^({_num_text(exponent)})"
    if exponent == 1:
        return f"({to_text(base)})" if _needs_parens_as_base(base) else to_text(base)
    if exponent == _FHALF:
        return f"sqrt({to_text(base)})"
    b = to_text(base)
    if _needs_parens_as_base(base):
        b = f"({b})"
    if exponent.denominator == 1 and exponent > 0:
        return f"{b}^{exponent.numerator}"
    return f"{b}^({_num_text(exponent)})"


def _factor_text(f: Expression) -> str:
    t = to_text(f)
    if isinstance(f, Add):
        return f"({t})"
    return t


def _product_text(coeff, factors) -> str:
    nums = []
    dens = []
    for f in factors:
        if isinstance(f, Pow) and f.exponent < 0 and f.exponent != _FHALF:
            dens.append((f.base, -f.exponent))
        else:
            nums.append(f)
    num_parts = []
    den_parts = []
    if isinstance(coeff, float):
        num_parts.append(repr(coeff))
    else:
        if coeff.numerator != 1 or not nums:
            num_parts.append(str(coeff.numerator))
        if coeff.denominator != 1:
            den_parts.append(str(coeff.denominator))
    for f in nums:
        num_parts.append(_factor_text(f))
    for base, e in dens:
        den_parts.append(_pow_text(base, e) if e != 1 else
                         (f"({to_text(base)})" if isinstance(base, (Add, Mul)) else to_text(base)))
    top = "*".join(num_parts) if num_parts else "1"
    if not den_parts:
        return top
    if len(den_parts) == 1:
        return f"{top}/{den_parts[0]}"
    return f"{top}/({'*'.join(den_parts)})"


def to_text(e: Expression) -> str:
    """Canonical text form; reparsing yields an equal expression."""
    if isinstance(e, Num):
        return _num_text(e.value)
    if isinstance(e, Sym):
        return e.name
    if isinstance(e, Fn):
        return f"{e.name}({to_text(e.arg)})"
    if isinstance(e, Pow):
        return _pow_text(e.base, e.exponent)
    if isinstance(e, Mul):
        coeff, mono = _coeff_monomial(e)
        if isinstance(coeff, Fraction) and coeff < 0:
            return "-" + _product_text(-coeff, mono)
        if isinstance(coeff, float) and coeff < 0:
            return "-" + _product_text(-coeff, mono)
        return _product_text(coeff, mono)
    if isinstance(e, Add):
        parts = []
        for i, t in enumerate(e.terms):
            s = to_text(t)
            if i == 0:
                parts.append(s)
            elif s.startswith("-"):
                parts.append(" - " + s[1:])
            else:
                parts.append(" + " + s)
        return "".join(parts)
    raise ExpressionError(f"unknown node {e!r}")
