"""Pfaffian forms of a solvable structure and their integration.

Given the ordered fields (A, Y_1, ..., Y_{m-1}) on an m-dimensional chart,
lambda is the full contraction of the volume form and omega_i the
contraction with Y_i omitted, scaled by 1/lambda.  The omega_i annihilate A
and satisfy a triangular closure property; integrating them level by level
(restricting to the submanifolds where the higher primitives are constant)
produces first integrals, and in action-angle form the top n forms are the
differentials of the momenta while the lower n identify the angles.
"""

from __future__ import annotations

import itertools
import json
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Optional, Sequence

import numpy as np

from . import symexpr as se
from .exterior import (Chart, DifferentialForm, VectorField, contract_all,
                       differential, exterior_derivative, hamiltonian_vector_field,
                       interior_product, poisson_bracket, volume_form, _sorted_key)
from .reexpress import ReExpressionError, express_in_basis, rationalize
from .structure import HamiltonianSystem, _sym_det, structure_fields
from .symexpr import Expression, Verdict, ZERO, ONE

__all__ = [
    "PfaffianSet", "DescentResult", "DescentLevel", "FlowRecovery",
    "ClosureReport", "PfaffianError", "PrimitiveNotFound", "ExtractionError",
    "compute_pfaffian_set", "pfaffian_set_from_system", "action_angle_pfaffians",
    "certify_triangular_closure", "descend_quadratures", "recover_linear_flow",
    "extract_action_angle", "ActionAngleExtraction", "build_invariant_chart",
    "InvariantChart", "find_primitive", "delta_matrix", "delta_parity_sign",
]


class PfaffianError(Exception):
    pass


class PrimitiveNotFound(PfaffianError):
    pass


class ExtractionError(PfaffianError):
    pass


# ---------------------------------------------------------------------------
# Pfaffian sets


@dataclass
class PfaffianSet:
    chart: Chart
    lam: Expression
    forms: list                      # omega_1 .. omega_{m-1}
    omitted: tuple                   # label of the omitted field per form
    field_labels: tuple
    annihilation: tuple = ()         # verdict values of omega_i(A)

    def omega(self, i: int) -> DifferentialForm:
        """1-based accessor matching the omega_i numbering."""
        return self.forms[i - 1]

    def to_json(self) -> dict:
        return {
            "chart": list(self.chart.names),
            "lambda": se.to_text(self.lam),
            "forms": {
                f"omega_{i+1}": {"omitted": self.omitted[i], "form": w.to_text()}
                for i, w in enumerate(self.forms)
            },
            "annihilation": list(self.annihilation),
        }


def compute_pfaffian_set(fields: Sequence[VectorField], chart: Chart,
                         volume_coeff: Expression = ONE,
                         labels: Optional[Sequence[str]] = None) -> PfaffianSet:
    """Contraction-defined Pfaffian forms for ordered fields (A, Y_1, ...).

    The first field is the distribution generator and is never omitted;
    omega_i omits the i-th of the remaining fields.  `volume_coeff` scales
    the coordinate volume form (used when the chart is a nonlinear
    re-coordinatization of a reference chart).
    """
    m = chart.dim
    if len(fields) != m:
        raise PfaffianError(f"need {m} fields on a {m}-dimensional chart")
    labels = tuple(labels) if labels else tuple(f"Y{i}" for i in range(m))
    tau = volume_form(chart, volume_coeff)
    lam = se.simplify(contract_all(tau, list(fields)).coefficient(()))
    v = se.is_zero(lam)
    if v.zero:
        raise PfaffianError("fields are linearly dependent: lambda vanishes")
    inv_lam = se.pow_(lam, -1)
    forms = []
    omitted = []
    for i in range(1, m):
        kept = [fields[0]] + [fields[j] for j in range(1, m) if j != i]
        w = contract_all(tau, kept)
        w = w.map_coefficients(lambda c: se.simplify(se.mul(inv_lam, c)))
        forms.append(w)
        omitted.append(labels[i])
    annihilation = tuple(
        se.is_zero(se.simplify(interior_product(fields[0], w).coefficient(()))).value
        for w in forms)
    return PfaffianSet(chart=chart, lam=lam, forms=forms, omitted=tuple(omitted),
                       field_labels=labels, annihilation=annihilation)


def pfaffian_set_from_system(system: HamiltonianSystem) -> PfaffianSet:
    """Pfaffian set of the canonical structure in the original (t, q, p) chart."""
    labels, fields = structure_fields(system)
    return compute_pfaffian_set(fields, system.extended(), labels=labels)


def _minor(rows, cols, mat):
    return _sym_det([[mat[i][j] for j in cols] for i in rows])


def action_angle_pfaffians(H: Expression, F: Sequence[Expression],
                           chart: Chart) -> PfaffianSet:
    """Closed-form Pfaffian set in action-angle variables.

    `H` and every integral must be expressions in the momentum coordinates
    alone; the top n forms come out as signed dP_k exactly and the lower n
    carry Jacobian-minor coefficients on dt and dQ_j.
    """
    if chart.time is None or not chart.is_phase:
        raise PfaffianError("an extended action-angle chart (t, Q, P) is required")
    n = chart.n
    P = list(chart.p)
    for G in list(F) + [H]:
        bad = se.free_symbols(G) - set(P)
        if bad:
            raise PfaffianError(f"not a function of the momenta alone: {sorted(bad)}")
    DF = [[se.differentiate(Fi, Pj) for Pj in P] for Fi in F]
    detDF = se.simplify(_sym_det(DF))
    if se.is_zero(detDF).zero:
        raise PfaffianError("Jacobian dF/dP is singular")
    lam = se.simplify(se.mul(se.num((-1) ** n), detDF))
    inv_lam = se.pow_(lam, -1)
    sign_n = se.num((-1) ** n)
    DH = [se.differentiate(H, Pj) for Pj in P]
    full = [DH] + DF

    forms = []
    omitted = []
    for k in range(1, n + 1):
        w = DifferentialForm(chart, 1)
        rows = [0] + [r for r in range(1, n + 1) if r != k]
        dt_det = _minor(rows, list(range(n)), full)
        w.insert((chart.index(chart.time),),
                 se.simplify(se.mul(sign_n, inv_lam, dt_det)))
        frows = [r for r in range(1, n + 1) if r != k]
        for j in range(1, n + 1):
            cols = [c for c in range(n) if c != j - 1]
            mj = _minor(frows, cols, full)
            coeff = se.simplify(se.mul(sign_n, se.num((-1) ** j), inv_lam, mj))
            w.insert((chart.index(chart.q[j - 1]),), coeff)
        forms.append(w)
        omitted.append(f"X_F{k}")
    for k in range(1, n + 1):
        w = DifferentialForm(chart, 1)
        w.insert((chart.index(P[k - 1]),), se.num((-1) ** (n + k + 1)))
        forms.append(w)
        omitted.append(f"X_G{k}")
    labels = ("A",) + tuple(f"X_F{i+1}" for i in range(n)) + tuple(f"X_G{i+1}" for i in range(n))
    return PfaffianSet(chart=chart, lam=lam, forms=forms, omitted=tuple(omitted),
                       field_labels=labels)


# ---------------------------------------------------------------------------
# triangular closure


@dataclass
class ClosureReport:
    verdicts: list                   # per form: "closed" | "ideal" | "fail"
    residuals: list                  # numeric ideal-membership residuals
    passed: bool

    def to_json(self) -> dict:
        return {"passed": self.passed,
                "forms": [{"form": f"omega_{i+1}", "verdict": v, "residual": r}
                          for i, (v, r) in enumerate(zip(self.verdicts, self.residuals))]}


def _wedge_numeric(a: dict, b: dict) -> dict:
    out: dict = {}
    for ia, ca in a.items():
        sa = set(ia)
        for ib, cb in b.items():
            if sa & set(ib):
                continue
            idx, sign = _sorted_key(ia + ib)
            out[idx] = out.get(idx, 0.0) + sign * ca * cb
    return out


def _max_abs(d: dict) -> float:
    return max((abs(v) for v in d.values()), default=0.0)


def certify_triangular_closure(pset: PfaffianSet,
                               samples: Sequence[Mapping[str, float]],
                               tol: float = 1e-9) -> ClosureReport:
    """Certify d(omega_i) = 0 or membership in the ideal of the later forms.

    Closedness is a symbolic zero verdict; ideal membership is the numeric
    vanishing of d(omega_i) ^ omega_{i+1} ^ ... ^ omega_{m-1} at the samples
    (scale-normalized).  The final form must be closed.
    """
    m1 = len(pset.forms)
    verdicts = []
    residuals = []
    passed = True
    d_forms = [exterior_derivative(w) for w in pset.forms]
    for i in range(m1):
        v = d_forms[i].zero_verdict()
        if v.zero:
            verdicts.append("closed")
            residuals.append(0.0)
            continue
        if i == m1 - 1:
            verdicts.append("fail")
            residuals.append(float("inf"))
            passed = False
            continue
        worst = 0.0
        good = 0
        for pt in samples:
            try:
                acc = d_forms[i].evaluate_at(pt)
                scale = max(_max_abs(acc), 1.0)
                for j in range(i + 1, m1):
                    wj = pset.forms[j].evaluate_at(pt)
                    scale *= max(_max_abs(wj), 1.0)
                    acc = _wedge_numeric(acc, wj)
            except se.EvaluationError:
                continue
            good += 1
            worst = max(worst, _max_abs(acc) / scale)
        ok = good > 0 and worst <= tol
        verdicts.append("ideal" if ok else "fail")
        residuals.append(worst if good else float("inf"))
        passed = passed and ok
    return ClosureReport(verdicts=verdicts, residuals=residuals, passed=passed)


# ---------------------------------------------------------------------------
# primitive recognition


def _coordinate_degree(term: Expression, coords: set):
    deg = 0
    _, mono = se._coeff_monomial(term)
    for f in mono:
        if isinstance(f, se.Pow):
            base, ex = f.base, f.exponent
        else:
            base, ex = f, Fraction(1)
        fs = se.free_symbols(base)
        if fs & coords:
            if not isinstance(base, se.Sym) or ex.denominator != 1 or ex < 0:
                return None
            deg += int(ex)
    return deg


def _homotopy_primitive(w: DifferentialForm, coords: Sequence[str]) -> Expression:
    """Primitive of a closed polynomial 1-form via radial-path integration."""
    cs = set(coords)
    s_terms = []
    for (i,), c in w.comps.items():
        nm = w.chart.names[i]
        s_terms.append(se.mul(se.sym(nm), c))
    s = se.add(*s_terms)
    out = []
    for t in (s.terms if isinstance(s, se.Add) else (s,)):
        if t is ZERO:
            continue
        d = _coordinate_degree(t, cs)
        if d is None or d == 0:
            raise PrimitiveNotFound("form is not polynomial in the chart coordinates")
        out.append(se.mul(se.num(Fraction(1, d)), t))
    return se.add(*out)


def _denominator_bases(w: DifferentialForm):
    bases = []
    seen = set()
    for c in w.comps.values():
        c = se.together(c)
        terms = c.terms if isinstance(c, se.Add) else (c,)
        for t in terms:
            _, dens = se._split_denominator(t)
            for b in dens:
                if b not in seen:
                    seen.add(b)
                    bases.append(b)
    return bases


def _atan_candidates(bases, chart: Chart):
    """arctan(k*u/v) candidates from two-term sum-of-squares denominators."""
    out = []
    for b in bases:
        if not isinstance(b, se.Add) or len(b.terms) != 2:
            continue
        pieces = []
        for t in b.terms:
            coeff, mono = se._coeff_monomial(t)
            if len(mono) != 1 or not isinstance(mono[0], se.Pow):
                break
            pw = mono[0]
            if pw.exponent != 2 or not isinstance(pw.base, se.Sym):
                break
            if isinstance(coeff, float) or coeff <= 0:
                break
            pieces.append((coeff, pw.base))
        if len(pieces) != 2:
            continue
        (c1, x1), (c2, x2) = pieces
        # order the pair by chart position so candidates are deterministic
        i1 = chart.names.index(x1.name) if x1.name in chart.names else 0
        i2 = chart.names.index(x2.name) if x2.name in chart.names else 0
        if i1 > i2:
            (c1, x1), (c2, x2) = (c2, x2), (c1, x1)
        kappa = se.pow_(se.num(c1 / c2), Fraction(1, 2))
        out.append(se.fn("atan", se.mul(kappa, x1, se.pow_(x2, -1))))
    return out


def _positive_on_samples(expr: Expression, points) -> Optional[bool]:
    signs = []
    for pt in points:
        try:
            v = se.evaluate(expr, pt)
        except se.EvaluationError:
            continue
        signs.append(v > 0)
    if not signs:
        return None
    if all(signs):
        return True
    if not any(signs):
        return False
    return None


def _consolidate_logs(log_parts):
    """Combine sum of c_j ln(B_j) into gamma * ln(prod B_j^(r_j))."""
    if len(log_parts) < 2:
        return None
    coeffs = [c for c, _ in log_parts]
    gn, gd = 0, 1
    for c in coeffs:
        gn = __import__("math").gcd(gn, abs(c.numerator))
        gd = (gd * c.denominator) // __import__("math").gcd(gd, c.denominator)
    gamma = Fraction(gn, gd)
    if gamma == 0:
        return None
    if coeffs[0] < 0:
        gamma = -gamma
    arg = se.mul(*[se.pow_(B, c / gamma) for c, B in log_parts])
    return se.mul(se.num(gamma), se.fn("ln", arg))


def _sample_points(symbols, count: int, seed: int):
    rng = random.Random(seed)
    return [{nm: rng.uniform(-2.0, 2.0) for nm in symbols} for _ in range(count)]


def find_primitive(w: DifferentialForm, coords: Sequence[str],
                   points: Optional[Sequence[Mapping[str, float]]] = None,
                   seed: int = 7) -> Expression:
    """Primitive I with dI = w, via pattern recognition.

    Tries in order: radial integration for polynomial coefficients; then a
    rational-coefficient fit over d(coordinate), d(ln of denominator bases)
    and d(arctan of square-sum ratios), certified symbolically.  Raises
    PrimitiveNotFound when no pattern applies.
    """
    if w.degree != 1:
        raise PfaffianError("primitives are recovered for 1-forms only")
    if all(se.is_polynomial_in(c, coords) for c in w.comps.values()):
        cand = _homotopy_primitive(w, coords)
        if _certify_primitive(cand, w):
            return cand
        raise PrimitiveNotFound("radial integration failed its certificate")

    symbols = set()
    for c in w.comps.values():
        symbols |= se.free_symbols(c)
    symbols |= set(coords)
    if points is None:
        points = _sample_points(sorted(symbols), 24, seed)

    bases = _denominator_bases(w)
    candidates = [se.sym(nm) for nm in coords]
    log_bases = []
    for b in bases:
        pos = _positive_on_samples(b, points)
        if pos is False:
            b = se.mul(se.MINUS_ONE, b)
        log_bases.append(b)
        candidates.append(se.fn("ln", b))
    candidates.extend(_atan_candidates(bases, w.chart))

    rows = []
    rhs = []
    coord_idx = [w.chart.index(nm) for nm in coords]
    diffs = [[se.differentiate(c, w.chart.names[i]) for i in coord_idx] for c in candidates]
    for pt in points:
        for col, i in enumerate(coord_idx):
            try:
                row = [se.evaluate(d[col], pt) for d in diffs]
                y = se.evaluate(w.comps.get((i,), ZERO), pt) if (i,) in w.comps else 0.0
            except se.EvaluationError:
                continue
            rows.append(row)
            rhs.append(y)
    if len(rows) < max(4, len(candidates)):
        raise PrimitiveNotFound("not enough usable sample points")
    A = np.asarray(rows)
    b_vec = np.asarray(rhs)
    sol, *_ = np.linalg.lstsq(A, b_vec, rcond=None)
    fit_resid = float(np.max(np.abs(A @ sol - b_vec))) if len(b_vec) else 0.0
    if fit_resid > 1e-6 * max(1.0, float(np.max(np.abs(b_vec)))):
        raise PrimitiveNotFound(f"candidate fit residual too large ({fit_resid:.2e})")

    parts = []
    log_parts = []
    for c, cand in zip(sol, candidates):
        frac = rationalize(float(c))
        if frac is None:
            raise PrimitiveNotFound(f"coefficient {c!r} does not look rational")
        if frac == 0:
            continue
        if isinstance(cand, se.Fn) and cand.name == "ln":
            log_parts.append((frac, cand.arg))
        parts.append(se.mul(se.num(frac), cand))
    cand_expr = se.add(*parts) if parts else ZERO
    merged = _consolidate_logs(log_parts)
    if merged is not None:
        non_log = [p for p in parts
                   if not (isinstance(p, se.Mul) and any(isinstance(f, se.Fn) and f.name == "ln"
                                                         for f in p.factors))
                   and not (isinstance(p, se.Fn) and p.name == "ln")]
        merged_expr = se.add(*non_log, merged)
        if _positive_on_samples(_ln_argument(merged), points) and \
                _certify_primitive(merged_expr, w):
            return merged_expr
    if _certify_primitive(cand_expr, w):
        return cand_expr
    raise PrimitiveNotFound("fit certificate failed")


def _ln_argument(e: Expression) -> Expression:
    if isinstance(e, se.Fn) and e.name == "ln":
        return e.arg
    if isinstance(e, se.Mul):
        for f in e.factors:
            if isinstance(f, se.Fn) and f.name == "ln":
                return f.arg
    return ONE


def _certify_primitive(I: Expression, w: DifferentialForm) -> bool:
    for i, nm in enumerate(w.chart.names):
        diff = se.differentiate(I, nm) - w.comps.get((i,), ZERO)
        if not se.is_zero(diff).zero:
            return False
    return True


# ---------------------------------------------------------------------------
# quadrature descent


@dataclass
class DescentLevel:
    index: int                        # omega index integrated at this level
    primitive: Expression
    constant: str
    exactness: str                    # verdict of d(restricted form) = 0
    certified: bool                   # dI == restricted form, zero verdicts
    eliminated: Optional[str] = None
    solution: Optional[Expression] = None

    def to_json(self) -> dict:
        doc = {"omega": self.index, "primitive": se.to_text(self.primitive),
               "constant": self.constant, "exactness": self.exactness,
               "certified": self.certified}
        if self.eliminated:
            doc["eliminated"] = self.eliminated
            doc["solution"] = se.to_text(self.solution)
        return doc


@dataclass
class DescentResult:
    chart: Chart
    levels: list
    complete: bool
    halted_at: Optional[int] = None
    halt_reason: Optional[str] = None

    @property
    def constants(self):
        return [lv.constant for lv in self.levels]

    def solution_map(self) -> dict:
        """Eliminated coordinates as functions of survivors and constants."""
        out = {}
        exprs = [(lv.eliminated, lv.solution) for lv in self.levels if lv.eliminated]
        for i in range(len(exprs) - 1, -1, -1):
            nm, ex = exprs[i]
            later = {n: s for n, s in exprs[i + 1:]}
            out[nm] = se.substitute(ex, later)
        # resolve chains completely
        changed = True
        while changed:
            changed = False
            for nm in out:
                new = se.substitute(out[nm], {k: v for k, v in out.items() if k != nm})
                if new != out[nm]:
                    out[nm] = new
                    changed = True
        return out

    def to_json(self) -> dict:
        return {"complete": self.complete,
                "halted_at": self.halted_at,
                "halt_reason": self.halt_reason,
                "levels": [lv.to_json() for lv in self.levels]}


def _restrict_form(w: DifferentialForm, coord: str, value: Expression) -> DifferentialForm:
    """Restrict a 1-form to the graph {coord = value(rest)}."""
    old = w.chart
    e = old.index(coord)
    new_names = tuple(nm for nm in old.names if nm != coord)
    new_chart = Chart(names=new_names,
                      time=old.time if old.time != coord else None)
    sub = {coord: value}
    a_e = w.comps.get((e,), ZERO)
    out = DifferentialForm(new_chart, 1)
    for new_i, nm in enumerate(new_names):
        old_i = old.index(nm)
        coeff = se.add(w.comps.get((old_i,), ZERO),
                       se.mul(a_e, se.differentiate(value, nm)))
        out.insert((new_i,), se.simplify(se.substitute(coeff, sub)))
    return out


def _solve_coordinate(I: Expression, constant: Expression, coord: str):
    """Solve I = constant for `coord` via linear / log / arctan isolation."""
    x = se.sym(coord)
    dI = se.differentiate(I, coord)
    if dI is ZERO:
        return None
    if coord not in se.free_symbols(dI):
        # linear: I = a x + rest
        rest = se.simplify(I - se.mul(dI, x))
        if coord in se.free_symbols(rest):
            return None
        return se.simplify(se.mul(constant - rest, se.pow_(dI, -1)))
    # single transcendental term: I = a*f(U) + rest with U linear in coord
    terms = I.terms if isinstance(I, se.Add) else (I,)
    hits = [t for t in terms if coord in se.free_symbols(t)]
    if len(hits) != 1:
        return None
    c, mono = se._coeff_monomial(hits[0])
    if len(mono) != 1 or not isinstance(mono[0], se.Fn):
        return None
    f = mono[0]
    if f.name not in ("ln", "atan"):
        return None
    U = f.arg
    dU = se.differentiate(U, coord)
    if coord in se.free_symbols(dU) or dU is ZERO:
        return None
    rest = se.add(*[t for t in terms if t is not hits[0]])
    if coord in se.free_symbols(rest):
        return None
    inner = se.mul(constant - rest, se.pow_(se.num(c), -1))
    inverse = se.fn("exp", inner) if f.name == "ln" else se.fn("tan", inner)
    u0 = se.simplify(U - se.mul(dU, x))
    return se.simplify(se.mul(inverse - u0, se.pow_(dU, -1)))


def invariant_points(inv: InvariantChart, system: HamiltonianSystem,
                     count: int = 24, seed: int = 5):
    """Push phase-space samples forward onto the invariant chart.

    Descent sample points must sit on the reachable domain so that branch
    choices (signs inside logarithms) match the actual orbits.
    """
    phase_pts = system.sample_points(count, seed=seed, with_time=True)
    tname = inv.chart.time or "t"
    out = []
    for pt in phase_pts:
        d = {tname: pt.get(tname, 0.0)}
        for nm, expr in inv.definitions.items():
            d[nm] = se.evaluate(expr, pt)
        out.append(d)
    return out


def descend_quadratures(pset: PfaffianSet,
                        points: Optional[Sequence[Mapping[str, float]]] = None,
                        seed: int = 7, constant_prefix: str = "C") -> DescentResult:
    """Integrate the Pfaffian system level by level from the top form down.

    Each level finds a primitive of the current restriction, introduces a
    fresh constant, and eliminates one coordinate (never time).  Sample
    points, when given, are carried through the descent with each new
    constant evaluated on them, which keeps logarithm branches consistent
    with the sampled domain.  Halts gracefully with a partial result when a
    primitive or an elimination is out of reach.
    """
    m1 = len(pset.forms)
    working = {i: pset.forms[i - 1] for i in range(1, m1 + 1)}
    levels = []
    chart = pset.chart
    points = [dict(p) for p in points] if points else None
    for k in range(m1, 0, -1):
        w = working[k]
        cur_chart = w.chart
        coords = list(cur_chart.names)
        dverdict = exterior_derivative(w).zero_verdict()
        if not dverdict.zero:
            return DescentResult(chart=chart, levels=levels, complete=False,
                                 halted_at=k, halt_reason="restricted form is not closed")
        try:
            I = find_primitive(w, coords, points=points, seed=seed + k)
        except PrimitiveNotFound as exc:
            return DescentResult(chart=chart, levels=levels, complete=False,
                                 halted_at=k, halt_reason=str(exc))
        cname = f"{constant_prefix}{k}"
        C = se.sym(cname)
        if points is not None:
            kept = []
            for pt in points:
                try:
                    pt[cname] = se.evaluate(I, pt)
                    kept.append(pt)
                except se.EvaluationError:
                    continue
            points = kept or None
        solution = None
        eliminated = None
        for coord in reversed(coords):
            if coord == cur_chart.time:
                continue
            solution = _solve_coordinate(I, C, coord)
            if solution is not None:
                eliminated = coord
                break
        level = DescentLevel(index=k, primitive=I, constant=cname,
                             exactness=dverdict.value, certified=True,
                             eliminated=eliminated, solution=solution)
        levels.append(level)
        if eliminated is None:
            return DescentResult(chart=chart, levels=levels, complete=False,
                                 halted_at=k,
                                 halt_reason="constraint not solvable in closed form")
        for j in range(1, k):
            working[j] = _restrict_form(working[j], eliminated, solution)
    return DescentResult(chart=chart, levels=levels, complete=True)


# ---------------------------------------------------------------------------
# linear flow via Cramer's rule


def delta_parity_sign(n: int) -> int:
    """Sign s(n) in det(Delta) = s(n) * lambda^(n-1)."""
    return -1 if (n * (n + 3) // 2) % 2 else 1


def delta_matrix(F: Sequence[Expression], P: Sequence[str]):
    """Delta_ij: signed minors of dF/dP omitting row i and column j."""
    n = len(F)
    DF = [[se.differentiate(Fi, Pj) for Pj in P] for Fi in F]
    delta = [[None] * n for _ in range(n)]
    for i in range(n):
        rows = [r for r in range(n) if r != i]
        for j in range(n):
            cols = [c for c in range(n) if c != j]
            m = _sym_det([[DF[r][c] for c in cols] for r in rows])
            if j % 2:  # (-1)^(j+1) with 1-based column index
                m = se.mul(se.MINUS_ONE, m)
            delta[i][j] = se.simplify(m)
    return delta, DF


@dataclass
class FlowRecovery:
    delta: list
    b_vector: list
    k_constants: list
    det_delta: Expression
    lam: Expression
    parity_sign: int
    det_identity: str
    cramer_identity: str
    offset_identity: str
    flow_coefficients: list
    offsets: list
    t_value: float
    positions: Optional[list] = None

    def to_json(self) -> dict:
        return {
            "det_delta": se.to_text(self.det_delta),
            "parity_sign": self.parity_sign,
            "det_identity": self.det_identity,
            "cramer_identity": self.cramer_identity,
            "offset_identity": self.offset_identity,
            "flow_coefficients": [se.to_text(c) for c in self.flow_coefficients],
            "offsets": self.offsets,
            "t": self.t_value,
            "positions": self.positions,
        }


def recover_linear_flow(H: Expression, F: Sequence[Expression], P: Sequence[str],
                        Q0: Sequence[float], t_value: float,
                        P0: Optional[Mapping[str, float]] = None,
                        t_name: str = "t") -> FlowRecovery:
    """Solve the linear system Delta Q = B by Cramer's rule and verify the flow.

    Verifies symbolically that det(Delta) matches the parity-signed power of
    lambda, that the Cramer solution equals the linear flow
    Q_j(t) = dH/dP_j * t + Q_j0, and that det(Delta_j^(2)) = det(Delta) Q_j0.
    """
    n = len(F)
    delta, DF = delta_matrix(F, P)
    detDF = se.simplify(_sym_det(DF))
    lam = se.simplify(se.mul(se.num((-1) ** n), detDF))
    det_delta = se.simplify(_sym_det(delta))
    if se.is_zero(det_delta).zero:
        raise PfaffianError("det(Delta) vanishes: integrals dependent")
    sign = delta_parity_sign(n)
    det_id = se.is_zero(det_delta - se.mul(se.num(sign), se.pow_(lam, n - 1)))

    t = se.sym(t_name)
    DH = [se.differentiate(H, Pj) for Pj in P]
    full = [DH] + [[se.differentiate(Fi, Pj) for Pj in P] for Fi in F]
    K = []
    B = []
    for i in range(n):
        rows = [0] + [r for r in range(1, n + 1) if r != i + 1]
        dt_det = _minor(rows, list(range(n)), full)
        Ki = se.add(*[se.mul(delta[i][j], se.num(Q0[j])) for j in range(n)])
        K.append(se.simplify(Ki))
        B.append(se.simplify(se.add(se.mul(dt_det, t), K[-1])))

    inv_det = se.pow_(det_delta, -1)
    cramer_ok = Verdict.PROVEN_ZERO
    offset_ok = Verdict.PROVEN_ZERO
    flow_coeffs = []
    positions = []
    numeric_ok = True
    for j in range(n):
        delta_j = [[B[i] if c == j else delta[i][c] for c in range(n)] for i in range(n)]
        qj = se.simplify(se.mul(_sym_det(delta_j), inv_det))
        flow = se.add(se.mul(DH[j], t), se.num(Q0[j]))
        v = se.is_zero(qj - flow)
        if not v.zero:
            cramer_ok = v
        delta_j2 = [[K[i] if c == j else delta[i][c] for c in range(n)] for i in range(n)]
        v2 = se.is_zero(se.simplify(_sym_det(delta_j2)) -
                        se.mul(det_delta, se.num(Q0[j])))
        if not v2.zero:
            offset_ok = v2
        flow_coeffs.append(se.simplify(DH[j]))
        env = dict(P0 or {})
        try:
            positions.append(se.evaluate(flow_coeffs[-1], env) * t_value + float(Q0[j]))
        except se.EvaluationError:
            numeric_ok = False
    return FlowRecovery(delta=delta, b_vector=B, k_constants=K,
                        det_delta=det_delta, lam=lam, parity_sign=sign,
                        det_identity=det_id.value,
                        cramer_identity=cramer_ok.value,
                        offset_identity=offset_ok.value,
                        flow_coefficients=flow_coeffs,
                        offsets=[float(v) for v in Q0], t_value=float(t_value),
                        positions=positions if numeric_ok else None)


# ---------------------------------------------------------------------------
# invariant charts and action-angle extraction


@dataclass
class InvariantChart:
    chart: Chart
    fields: list
    labels: tuple
    volume_coeff: Expression
    definitions: dict                # new coordinate name -> (q,p) expression


def build_invariant_chart(system: HamiltonianSystem, degree: int = 2,
                          n_points: int = 48, seed: int = 11) -> InvariantChart:
    """Re-coordinatize the structure onto (t, F_1.., G_1..) invariants.

    Every field component X(y) is a Poisson bracket computed in the original
    chart and then re-expressed as a certified polynomial in the invariants;
    the volume coefficient is 1/J with J the Jacobian determinant of the
    coordinate change.
    """
    if system.g_functions is None:
        raise PfaffianError("the invariant chart needs the G-functions")
    n = system.n
    names = ("t",) + tuple(f"F{i+1}" for i in range(n)) + tuple(f"G{i+1}" for i in range(n))
    chart = Chart(names=names, time="t")
    funcs = list(system.integrals) + list(system.g_functions)
    func_names = names[1:]
    atoms = [(se.sym(nm), expr) for nm, expr in zip(func_names, funcs)]
    points = system.sample_points(n_points, seed=seed, with_time=False)

    def express(target):
        return express_in_basis(target, atoms, points, degree=degree)

    fields = []
    labels = ["A"] + [f"X_F{i+1}" for i in range(n)] + [f"X_G{i+1}" for i in range(n)]
    sources = [None] + funcs  # None marks the evolution field
    pch = system.chart
    for src in sources:
        coeffs = [ZERO] * chart.dim
        if src is None:
            coeffs[0] = ONE
        for ci, y in enumerate(funcs):
            if src is None:
                comp = poisson_bracket(y, system.hamiltonian, pch)
            else:
                comp = poisson_bracket(y, src, pch)
            comp = se.simplify(comp)
            coeffs[1 + ci] = express(comp) if comp is not ZERO else ZERO
        fields.append(VectorField(chart, tuple(coeffs)))

    jac = [[se.differentiate(f, nm) for nm in pch.names] for f in funcs]
    J = se.simplify(_sym_det(jac))
    J_inv = express(J)
    volume_coeff = se.pow_(J_inv, -1)
    definitions = dict(zip(func_names, funcs))
    return InvariantChart(chart=chart, fields=fields, labels=tuple(labels),
                          volume_coeff=volume_coeff, definitions=definitions)


@dataclass
class ActionAngleExtraction:
    P: list                         # action variables in the original chart
    Q: list                         # angle variables in the original chart
    H_in_P: Expression
    F_in_P: list
    canonicity: dict                # bracket label -> verdict value
    canonical: bool
    assignment: tuple               # Q_j = G_{assignment[j]+1}
    template: PfaffianSet
    computed: PfaffianSet

    def to_json(self) -> dict:
        return {
            "P": [se.to_text(p) for p in self.P],
            "Q": [se.to_text(q) for q in self.Q],
            "H(P)": se.to_text(self.H_in_P),
            "F(P)": [se.to_text(f) for f in self.F_in_P],
            "canonicity": dict(self.canonicity),
            "canonical": self.canonical,
        }


def _log_atom(P_sym: Expression, P_expr: Expression):
    """When P = gamma*ln(U), return (exp(P/gamma), U) as an extra fit atom."""
    c, mono = se._coeff_monomial(P_expr)
    if len(mono) == 1 and isinstance(mono[0], se.Fn) and mono[0].name == "ln" \
            and not isinstance(c, float):
        new = se.fn("exp", se.mul(se.num(Fraction(1, 1) / c), P_sym))
        return (new, mono[0].arg)
    return None


def extract_action_angle(system: HamiltonianSystem,
                         descent: Optional[DescentResult] = None,
                         pset: Optional[PfaffianSet] = None,
                         degree: int = 2, seed: int = 13) -> ActionAngleExtraction:
    """Recover action-angle variables by comparing Pfaffian forms.

    The momenta come from primitives of the top n computed forms; H and the
    integrals are re-expressed in them, the closed-form template is built,
    and the angles are identified by matching its pullback against the
    computed lower forms over candidate assignments from the G-functions.
    """
    if system.g_functions is None:
        raise ExtractionError("extraction needs the structure's G-functions")
    n = system.n
    if pset is None:
        pset = pfaffian_set_from_system(system)
    points = system.sample_points(48, seed=seed)

    P_exprs = []
    for k in range(1, n + 1):
        w = pset.omega(n + k)
        sign = se.num((-1) ** (n + k + 1))
        signed = w.map_coefficients(lambda c: se.mul(sign, c))
        v = exterior_derivative(signed).zero_verdict()
        if not v.zero:
            raise ExtractionError(f"omega_{n+k} is not closed (verdict {v.value})")
        try:
            P_exprs.append(find_primitive(signed, list(pset.chart.names),
                                          points=points, seed=seed + k))
        except PrimitiveNotFound as exc:
            raise ExtractionError(f"no primitive for omega_{n+k}: {exc}") from exc

    P_syms = [se.sym(f"P{k+1}") for k in range(n)]
    atoms = list(zip(P_syms, P_exprs))
    for Ps, Pe in zip(P_syms, P_exprs):
        extra = _log_atom(Ps, Pe)
        if extra is not None:
            atoms.append(extra)
    try:
        H_in_P = express_in_basis(system.hamiltonian, atoms, points, degree=degree)
        F_in_P = [express_in_basis(F, atoms, points, degree=degree)
                  for F in system.integrals]
    except ReExpressionError as exc:
        raise ExtractionError(f"cannot express H, F in the recovered momenta: {exc}") from exc

    q_names = tuple(f"Q{k+1}" for k in range(n))
    p_names = tuple(f"P{k+1}" for k in range(n))
    aa_chart = Chart(names=("t",) + q_names + p_names, time="t", q=q_names, p=p_names)
    template = action_angle_pfaffians(H_in_P, F_in_P, aa_chart)

    P_sub = {f"P{k+1}": P_exprs[k] for k in range(n)}
    Gs = list(system.g_functions)
    chart = pset.chart
    assignment = None
    for perm in itertools.permutations(range(n)):
        ok = True
        for k in range(1, n + 1):
            tw = template.omega(k)
            cand = DifferentialForm(chart, 1)
            dt_coeff = tw.coefficient((aa_chart.index("t"),))
            cand.insert((chart.index(chart.time),), se.substitute(dt_coeff, P_sub))
            for j in range(n):
                cj = se.substitute(tw.coefficient((aa_chart.index(q_names[j]),)), P_sub)
                if cj is ZERO:
                    continue
                dG = differential(Gs[perm[j]], chart)
                for idx, dc in dG.comps.items():
                    cand.insert(idx, se.mul(cj, dc))
            comp = pset.omega(k)
            for i in range(chart.dim):
                dv = se.is_zero(comp.coefficient((i,)) - cand.coefficient((i,)))
                if not dv.zero:
                    ok = False
                    break
            if not ok:
                break
        if ok:
            assignment = perm
            break
    if assignment is None:
        raise ExtractionError("no assignment of angle candidates matches the template")
    Q_exprs = [Gs[assignment[j]] for j in range(n)]

    canonicity = {}
    canonical = True
    pch = system.chart
    for i in range(n):
        for j in range(n):
            v = se.is_zero(poisson_bracket(Q_exprs[i], P_exprs[j], pch)
                           - (ONE if i == j else ZERO))
            canonicity[f"{{Q{i+1},P{j+1}}}-{1 if i == j else 0}"] = v.value
            canonical = canonical and v.zero
            if j > i:
                vq = se.is_zero(poisson_bracket(Q_exprs[i], Q_exprs[j], pch))
                vp = se.is_zero(poisson_bracket(P_exprs[i], P_exprs[j], pch))
                canonicity[f"{{Q{i+1},Q{j+1}}}"] = vq.value
                canonicity[f"{{P{i+1},P{j+1}}}"] = vp.value
                canonical = canonical and vq.zero and vp.zero
    return ActionAngleExtraction(P=P_exprs, Q=Q_exprs, H_in_P=H_in_P, F_in_P=F_in_P,
                                 canonicity=canonicity, canonical=canonical,
                                 assignment=assignment, template=template,
                                 computed=pset)
