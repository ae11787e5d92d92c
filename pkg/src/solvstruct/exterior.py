"""Exterior calculus on a single coordinate chart.

Vector fields and differential forms carry symbolic coefficients from
`symexpr`.  Forms are stored sparsely by strictly increasing index tuples
with sign normalization on insertion; coefficients that are provably zero
are pruned, numerically-zero ones are kept (and can be listed via
`DifferentialForm.numeric_zero_keys`).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

from . import symexpr as se
from .symexpr import Expression, ZERO, ONE, Verdict

__all__ = [
    "Chart", "VectorField", "DifferentialForm", "ChartError",
    "phase_chart", "extended_chart",
    "hamiltonian_vector_field", "time_evolution_field",
    "poisson_bracket", "lie_bracket",
    "wedge", "interior_product", "exterior_derivative", "differential",
    "volume_form", "contract_all",
]


class ChartError(se.ExpressionError):
    pass


@dataclass(frozen=True)
class Chart:
    """Ordered coordinate names, optionally with time and (q, p) pairing."""

    names: tuple
    time: Optional[str] = None
    q: tuple = ()
    p: tuple = ()

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ChartError("duplicate coordinate names")
        if len(self.q) != len(self.p):
            raise ChartError("q and p coordinates must pair up")
        for nm in (self.time,) if self.time else ():
            if nm not in self.names:
                raise ChartError(f"time coordinate '{nm}' not in chart")
        for nm in self.q + self.p:
            if nm not in self.names:
                raise ChartError(f"phase coordinate '{nm}' not in chart")

    @property
    def dim(self) -> int:
        return len(self.names)

    @property
    def n(self) -> int:
        return len(self.q)

    @property
    def is_phase(self) -> bool:
        return self.n > 0

    def index(self, name: str) -> int:
        return self.names.index(name)

    def coordinate(self, name: str) -> Expression:
        if name not in self.names:
            raise ChartError(f"'{name}' is not a chart coordinate")
        return se.sym(name)


def phase_chart(q: Sequence[str], p: Sequence[str]) -> Chart:
    return Chart(names=tuple(q) + tuple(p), q=tuple(q), p=tuple(p))


def extended_chart(chart: Chart, time: str = "t") -> Chart:
    """Prepend a time coordinate: (t, q_1..q_n, p_1..p_n)."""
    if chart.time is not None:
        return chart
    if time in chart.names:
        raise ChartError(f"'{time}' already used")
    return Chart(names=(time,) + chart.names, time=time, q=chart.q, p=chart.p)


@dataclass(frozen=True)
class VectorField:
    chart: Chart
    coeffs: tuple

    def __post_init__(self):
        if len(self.coeffs) != self.chart.dim:
            raise ChartError("coefficient count must equal chart dimension")

    def __getitem__(self, i: int) -> Expression:
        return self.coeffs[i]

    def apply(self, f: Expression) -> Expression:
        """Directional derivative X(f)."""
        return se.add(*[se.mul(c, se.differentiate(f, nm))
                        for c, nm in zip(self.coeffs, self.chart.names)])

    def evaluate(self, point: Mapping[str, float]):
        return [se.evaluate(c, point) for c in self.coeffs]

    def is_zero(self) -> bool:
        return all(c is ZERO for c in self.coeffs)

    def __add__(self, other: "VectorField") -> "VectorField":
        _same_chart(self, other)
        return VectorField(self.chart, tuple(se.add(a, b)
                                             for a, b in zip(self.coeffs, other.coeffs)))

    def __sub__(self, other: "VectorField") -> "VectorField":
        _same_chart(self, other)
        return VectorField(self.chart, tuple(se.add(a, se.mul(se.MINUS_ONE, b))
                                             for a, b in zip(self.coeffs, other.coeffs)))

    def scale(self, c) -> "VectorField":
        c = c if isinstance(c, Expression) else se.num(c)
        return VectorField(self.chart, tuple(se.mul(c, x) for x in self.coeffs))

    def __str__(self):
        parts = [f"({se.to_text(c)})·∂_{nm}" for c, nm in zip(self.coeffs, self.chart.names)
                 if c is not ZERO]
        return " + ".join(parts) if parts else "0"


def _same_chart(a, b):
    if a.chart != b.chart:
        raise ChartError("chart mismatch")


def _sorted_key(idx: Iterable[int]):
    """Sort an index tuple, returning (sorted tuple, permutation sign or 0)."""
    idx = tuple(idx)
    if len(set(idx)) != len(idx):
        return idx, 0
    sign = 1
    lst = list(idx)
    for i in range(len(lst)):
        for j in range(len(lst) - 1 - i):
            if lst[j] > lst[j + 1]:
                lst[j], lst[j + 1] = lst[j + 1], lst[j]
                sign = -sign
    return tuple(lst), sign


class DifferentialForm:
    """Degree-k form as a sparse map {increasing index tuple: coefficient}."""

    __slots__ = ("chart", "degree", "comps")

    def __init__(self, chart: Chart, degree: int,
                 comps: Optional[Mapping[tuple, Expression]] = None):
        if degree < 0 or degree > chart.dim:
            raise ChartError("degree must lie in [0, dim]")
        self.chart = chart
        self.degree = degree
        self.comps: dict = {}
        if comps:
            for idx, c in comps.items():
                self.insert(idx, c)

    def insert(self, idx, coeff: Expression):
        coeff = coeff if isinstance(coeff, Expression) else se.num(coeff)
        idx, sign = _sorted_key(idx)
        if sign == 0 or coeff is ZERO:
            return
        if len(idx) != self.degree:
            raise ChartError("index tuple length must equal the form degree")
        if idx and (idx[0] < 0 or idx[-1] >= self.chart.dim):
            raise ChartError("coordinate index out of range")
        if sign < 0:
            coeff = se.mul(se.MINUS_ONE, coeff)
        acc = se.add(self.comps.get(idx, ZERO), coeff)
        if acc is ZERO:
            self.comps.pop(idx, None)
        else:
            self.comps[idx] = acc

    def coefficient(self, idx) -> Expression:
        idx, sign = _sorted_key(idx)
        if sign == 0:
            return ZERO
        c = self.comps.get(idx, ZERO)
        return c if sign > 0 else se.mul(se.MINUS_ONE, c)

    def map_coefficients(self, f) -> "DifferentialForm":
        out = DifferentialForm(self.chart, self.degree)
        for idx, c in self.comps.items():
            out.insert(idx, f(c))
        return out

    def simplify(self) -> "DifferentialForm":
        return self.map_coefficients(se.simplify)

    def is_zero_form(self) -> bool:
        return not self.comps

    def zero_verdict(self) -> Verdict:
        """Aggregate verdict that every coefficient vanishes."""
        worst = Verdict.PROVEN_ZERO
        for c in self.comps.values():
            v = se.is_zero(c)
            if v is Verdict.PROVEN_NONZERO:
                return v
            if v is Verdict.NUMERICALLY_ZERO and worst is Verdict.PROVEN_ZERO:
                worst = v
            if v is Verdict.UNKNOWN:
                worst = v
        return worst

    def numeric_zero_keys(self):
        """Stored keys whose coefficient is only numerically zero."""
        return [idx for idx, c in self.comps.items()
                if se.is_zero(c) is Verdict.NUMERICALLY_ZERO]

    def evaluate_at(self, point: Mapping[str, float]) -> dict:
        return {idx: se.evaluate(c, point) for idx, c in self.comps.items()}

    def __eq__(self, other):
        return (isinstance(other, DifferentialForm) and self.chart == other.chart
                and self.degree == other.degree and self.comps == other.comps)

    def __call__(self, *fields: VectorField) -> Expression:
        if len(fields) != self.degree:
            raise ChartError("wrong number of vector-field arguments")
        out = self
        for X in reversed(fields):
            out = interior_product(X, out)  # pairs (X_1, ..., X_k) in order
        (coeff,) = out.comps.values() if out.comps else (ZERO,)
        return coeff if out.degree == 0 else ZERO

    def to_text(self) -> str:
        if not self.comps:
            return "0"
        names = self.chart.names
        parts = []
        for idx in sorted(self.comps):
            basis = "∧".join(f"d{names[i]}" for i in idx) if idx else "1"
            parts.append(f"({se.to_text(self.comps[idx])}) · {basis}")
        return " + ".join(parts)

    __str__ = to_text

    def __repr__(self):
        return f"<{self.degree}-form {self.to_text()}>"


def differential(f: Expression, chart: Chart) -> DifferentialForm:
    """df of a 0-form."""
    out = DifferentialForm(chart, 1)
    for i, nm in enumerate(chart.names):
        out.insert((i,), se.differentiate(f, nm))
    return out


def volume_form(chart: Chart, coefficient: Expression = ONE) -> DifferentialForm:
    out = DifferentialForm(chart, chart.dim)
    out.insert(tuple(range(chart.dim)), coefficient)
    return out


def wedge(a: DifferentialForm, b: DifferentialForm) -> DifferentialForm:
    _same_chart(a, b)
    if a.degree + b.degree > a.chart.dim:
        raise ChartError("wedge degree exceeds chart dimension")
    out = DifferentialForm(a.chart, a.degree + b.degree)
    for ia, ca in a.comps.items():
        sa = set(ia)
        for ib, cb in b.comps.items():
            if sa & set(ib):
                continue
            out.insert(ia + ib, se.mul(ca, cb))
    return out


def interior_product(X: VectorField, w: DifferentialForm) -> DifferentialForm:
    if X.chart != w.chart:
        raise ChartError("chart mismatch")
    if w.degree == 0:
        raise ChartError("cannot contract a 0-form")
    out = DifferentialForm(w.chart, w.degree - 1)
    for idx, c in w.comps.items():
        for r, i in enumerate(idx):
            xi = X.coeffs[i]
            if xi is ZERO:
                continue
            term = se.mul(xi, c)
            if r % 2:
                term = se.mul(se.MINUS_ONE, term)
            out.insert(idx[:r] + idx[r + 1:], term)
    return out


def exterior_derivative(w: DifferentialForm) -> DifferentialForm:
    if w.degree >= w.chart.dim:
        return DifferentialForm(w.chart, w.chart.dim)  # identically zero
    out = DifferentialForm(w.chart, w.degree + 1)
    for idx, c in w.comps.items():
        iset = set(idx)
        for m, nm in enumerate(w.chart.names):
            if m in iset:
                continue
            dc = se.differentiate(c, nm)
            if dc is ZERO:
                continue
            out.insert((m,) + idx, dc)
    return out


def contract_all(w: DifferentialForm, fields: Sequence[VectorField]) -> DifferentialForm:
    """Iterated interior product; the first field lands in the first slot."""
    out = w
    for X in fields:
        out = interior_product(X, out)
    return out


# ---------------------------------------------------------------------------
# Hamiltonian structure


def _require_phase(chart: Chart):
    if not chart.is_phase:
        raise ChartError("a phase-space chart with paired (q, p) is required")


def hamiltonian_vector_field(H: Expression, chart: Chart) -> VectorField:
    """X_H with coefficients (dH/dp_i, -dH/dq_i); time coefficient 0."""
    _require_phase(chart)
    coeffs = [ZERO] * chart.dim
    for qn, pn in zip(chart.q, chart.p):
        coeffs[chart.index(qn)] = se.differentiate(H, pn)
        coeffs[chart.index(pn)] = se.mul(se.MINUS_ONE, se.differentiate(H, qn))
    return VectorField(chart, tuple(coeffs))


def time_evolution_field(H: Expression, chart: Chart) -> VectorField:
    """A = d/dt + X_H on an extended chart."""
    _require_phase(chart)
    if chart.time is None:
        raise ChartError("an extended chart with a time coordinate is required")
    X = hamiltonian_vector_field(H, chart)
    coeffs = list(X.coeffs)
    coeffs[chart.index(chart.time)] = ONE
    return VectorField(chart, tuple(coeffs))


def poisson_bracket(F: Expression, G: Expression, chart: Chart) -> Expression:
    _require_phase(chart)
    terms = []
    for qn, pn in zip(chart.q, chart.p):
        terms.append(se.mul(se.differentiate(F, qn), se.differentiate(G, pn)))
        terms.append(se.mul(se.MINUS_ONE, se.differentiate(G, qn), se.differentiate(F, pn)))
    return se.add(*terms)


def lie_bracket(X: VectorField, Y: VectorField) -> VectorField:
    _same_chart(X, Y)
    coeffs = tuple(se.add(X.apply(Y.coeffs[i]),
                          se.mul(se.MINUS_ONE, Y.apply(X.coeffs[i])))
                   for i in range(X.chart.dim))
    return VectorField(X.chart, coeffs)
