"""Solvable-structure machinery for integrable Hamiltonian systems.

A solvable structure for the evolution field A = d/dt + X_H is the ordered
set {A, X_F_1..X_F_n, X_G_1..X_G_n}: integrals first, then the auxiliary
fields, each a symmetry of the span of everything before it.  This module
verifies such structures, fits the span coefficients of the bracket
relations at sample points, and certifies the exactly-zero brackets
symbolically.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import numeric, symexpr as se
from .exterior import (Chart, VectorField, extended_chart,
                       hamiltonian_vector_field, lie_bracket, phase_chart,
                       poisson_bracket, time_evolution_field)
from .reexpress import fit_span
from .symexpr import Expression, Verdict

__all__ = [
    "HamiltonianSystem", "SystemError", "make_system",
    "SolvableStructureReport", "SymmetryCheck", "RelationCheck",
    "is_symmetry", "verify_solvable_structure", "build_canonical_structure",
    "solve_span_coefficients", "check_g_matrix", "GMatrixReport",
    "structure_fields", "RankDeficientError",
    "DEFAULT_TOL", "DEFAULT_SEED", "INDEPENDENCE_RTOL",
]

DEFAULT_TOL = 1e-9
DEFAULT_SEED = 42
INDEPENDENCE_RTOL = 1e-8


class SystemError(Exception):
    pass


class RankDeficientError(Exception):
    pass


@dataclass(frozen=True)
class HamiltonianSystem:
    """A completely integrable system: chart, H, integrals, helpers.

    `g_functions` are the auxiliary functions closing the solvable structure;
    `singular` holds expressions whose magnitude proxies the distance to the
    singular sets; `box` bounds the sampling domain per coordinate.
    """

    chart: Chart
    hamiltonian: Expression
    integrals: tuple
    g_functions: Optional[tuple] = None
    singular: tuple = ()
    box: Mapping[str, tuple] = field(default_factory=dict)
    parameters: Mapping[str, float] = field(default_factory=dict)
    name: str = "system"
    action_angle: bool = False
    g_matrix: Optional[tuple] = None

    @property
    def n(self) -> int:
        return self.chart.n

    def extended(self) -> Chart:
        return extended_chart(self.chart)

    def hamiltonian_vector_field_coefficient(self, name: str) -> Expression:
        X = hamiltonian_vector_field(self.hamiltonian, self.chart)
        return X.coeffs[self.chart.index(name)]

    def evolution_field(self) -> VectorField:
        return time_evolution_field(self.hamiltonian, self.extended())

    def sample_points(self, count: int, seed: int = DEFAULT_SEED,
                      with_time: bool = True, eps: float = numeric.SINGULAR_GUARD):
        chart = self.extended() if with_time else self.chart
        bounds = dict(self.box)
        if with_time and chart.time is not None:
            bounds.setdefault(chart.time, (0.0, 1.0))
        return numeric.sample_box(chart, bounds, count, seed,
                                  singular=self.singular, eps=eps)

    def to_json(self) -> dict:
        doc = {
            "name": self.name,
            "chart": {"q": list(self.chart.q), "p": list(self.chart.p)},
            "n": self.n,
            "parameters": dict(self.parameters),
            "hamiltonian": se.to_text(self.hamiltonian),
            "integrals": [se.to_text(F) for F in self.integrals],
            "sampling_box": {k: list(v) for k, v in self.box.items()},
        }
        if self.g_functions:
            doc["g_functions"] = [se.to_text(G) for G in self.g_functions]
        if self.singular:
            doc["singular"] = [se.to_text(s) for s in self.singular]
        return doc


def make_system(chart: Chart, hamiltonian: Expression, integrals: Sequence[Expression],
                g_functions: Optional[Sequence[Expression]] = None,
                singular: Sequence[Expression] = (),
                box: Optional[Mapping[str, tuple]] = None,
                parameters: Optional[Mapping[str, float]] = None,
                name: str = "system", action_angle: bool = False,
                g_matrix=None, validate: bool = True,
                seed: int = DEFAULT_SEED) -> HamiltonianSystem:
    """Construct a system and check the integrability invariants.

    Checks: integral count equals n, involution brackets carry zero
    verdicts, and dF_1..dF_n have full rank at sampled non-singular points.
    """
    integrals = tuple(integrals)
    n = chart.n
    if not chart.is_phase:
        raise SystemError("a phase-space chart is required")
    if len(integrals) != n:
        raise SystemError(f"expected {n} first integrals, got {len(integrals)}")
    if g_functions is not None:
        g_functions = tuple(g_functions)
        if len(g_functions) != n:
            raise SystemError(f"expected {n} G-functions, got {len(g_functions)}")
    if box is None:
        box = {nm: (-2.0, 2.0) for nm in chart.names}
    sys_ = HamiltonianSystem(chart=chart, hamiltonian=hamiltonian, integrals=integrals,
                             g_functions=g_functions, singular=tuple(singular),
                             box=dict(box), parameters=dict(parameters or {}),
                             name=name, action_angle=action_angle,
                             g_matrix=g_matrix)
    if validate:
        for i, F in enumerate(integrals):
            v = se.is_zero(poisson_bracket(F, hamiltonian, chart))
            if not v.zero:
                raise SystemError(f"involution failure: {{F{i+1},H}} verdict {v.value}")
            for j in range(i + 1, n):
                v = se.is_zero(poisson_bracket(F, integrals[j], chart))
                if not v.zero:
                    raise SystemError(f"involution failure: {{F{i+1},F{j+1}}} verdict {v.value}")
        pts = sys_.sample_points(16, seed=seed, with_time=False)
        names = chart.names
        grads = [[se.differentiate(F, nm) for nm in names] for F in integrals]
        for pt in pts:
            jac = np.array([[se.evaluate(g, pt) for g in row] for row in grads])
            s = np.linalg.svd(jac, compute_uv=False)
            if s[-1] <= INDEPENDENCE_RTOL * max(s[0], 1e-300):
                raise SystemError(f"dF_1..dF_{n} rank-deficient at sample {pt}")
    return sys_


# ---------------------------------------------------------------------------
# symmetry and structure verification


@dataclass
class SymmetryCheck:
    independent: bool
    min_rel_singular_value: float
    max_residual: float
    coefficients: np.ndarray          # (brackets, samples, generators)
    passed: bool
    failed_bracket: Optional[int] = None   # index of the generator whose bracket failed


@dataclass
class RelationCheck:
    label: str
    kind: str                          # "zero" | "span"
    verdict: str
    max_residual: float = 0.0
    coefficients: Optional[np.ndarray] = None     # (samples, n) fitted values
    symbolic: Optional[tuple] = None              # expressions, when known

    def to_json(self) -> dict:
        doc = {"relation": self.label, "kind": self.kind, "verdict": self.verdict,
               "max_residual": self.max_residual}
        if self.coefficients is not None:
            doc["coefficients"] = [[float(v) for v in row] for row in self.coefficients]
        if self.symbolic is not None:
            doc["symbolic_coefficients"] = [se.to_text(c) for c in self.symbolic]
        return doc


@dataclass
class SolvableStructureReport:
    field_labels: tuple
    relations: list
    independence_min_det: float
    independence_min_rel_sv: float
    max_residual: float
    tol: float
    n_samples: int
    passed: bool
    f_tables: dict = field(default_factory=dict)   # (i, j) -> (samples, n)
    h_tables: dict = field(default_factory=dict)   # i -> (samples, n)
    samples: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "passed": bool(self.passed),
            "fields": list(self.field_labels),
            "tolerance": self.tol,
            "samples": self.n_samples,
            "max_residual": self.max_residual,
            "independence": {
                "min_abs_det": self.independence_min_det,
                "min_rel_singular_value": self.independence_min_rel_sv,
            },
            "relations": [r.to_json() for r in self.relations],
        }

    def to_json_text(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def _field_matrix(fields: Sequence[VectorField], point) -> np.ndarray:
    return np.array([f.evaluate(point) for f in fields])


def _direction_rel_sv(matrix: np.ndarray) -> float:
    """Smallest/largest singular value after row normalization.

    Rows are scaled to unit length first so that independence measures the
    angle between field directions, not their wildly different magnitudes
    near singular sets.
    """
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    s = np.linalg.svd(matrix / norms, compute_uv=False)
    return float(s[-1] / max(s[0], 1e-300))


def solve_span_coefficients(target: VectorField, basis: Sequence[VectorField], point):
    """Least-squares coefficients expressing target(point) in span(basis(point)).

    Raises RankDeficientError when the basis loses rank at the point; a
    target outside the span is reported through the residual instead.
    """
    B = _field_matrix(basis, point).T          # dim x r
    tv = np.asarray(target.evaluate(point))
    if _direction_rel_sv(B.T) <= INDEPENDENCE_RTOL:
        raise RankDeficientError(f"basis fields rank-deficient at {point}")
    return fit_span(tv, B)


def is_symmetry(Y: VectorField, generators: Sequence[VectorField],
                samples: Sequence[Mapping[str, float]], tol: float = DEFAULT_TOL) -> SymmetryCheck:
    """Check Def-style symmetry: independence plus brackets inside the span."""
    if not samples:
        raise SystemError("at least one sample point is required")
    for g in generators:
        if g.chart != Y.chart:
            raise SystemError("chart mismatch between fields")
    brackets = [lie_bracket(Y, A) for A in generators]
    r = len(generators)
    coeffs = np.zeros((len(brackets), len(samples), r))
    max_resid = 0.0
    min_rel_sv = np.inf
    independent = True
    failed_bracket = None
    for si, pt in enumerate(samples):
        stacked = _field_matrix(list(generators) + [Y], pt)
        rel = _direction_rel_sv(stacked)
        min_rel_sv = min(min_rel_sv, rel)
        if rel <= INDEPENDENCE_RTOL:
            independent = False
        B = _field_matrix(generators, pt).T
        for bi, br in enumerate(brackets):
            tv = np.asarray(br.evaluate(pt))
            c, resid = fit_span(tv, B)
            coeffs[bi, si] = c
            if resid > max_resid:
                max_resid = resid
            if resid > tol and failed_bracket is None:
                failed_bracket = bi
    passed = independent and max_resid <= tol
    return SymmetryCheck(independent=independent,
                         min_rel_singular_value=float(min_rel_sv),
                         max_residual=float(max_resid),
                         coefficients=coeffs,
                         passed=passed,
                         failed_bracket=None if passed else failed_bracket)


def verify_solvable_structure(fields: Sequence[VectorField],
                              samples: Sequence[Mapping[str, float]],
                              tol: float = DEFAULT_TOL) -> SolvableStructureReport:
    """Cascade check: field k must be a symmetry of span(fields[:k])."""
    if len(fields) < 2:
        raise SystemError("a solvable structure needs at least two fields")
    labels = tuple(f"Y{i}" for i in range(len(fields)))
    relations = []
    max_resid = 0.0
    min_rel_sv = np.inf
    passed = True
    for k in range(1, len(fields)):
        chk = is_symmetry(fields[k], fields[:k], samples, tol)
        max_resid = max(max_resid, chk.max_residual)
        min_rel_sv = min(min_rel_sv, chk.min_rel_singular_value)
        verdict = "pass" if chk.passed else (
            "independence-failure" if not chk.independent else
            f"span-failure at bracket {chk.failed_bracket}")
        relations.append(RelationCheck(label=f"step {k}: [{labels[k]}, span("
                                             + ",".join(labels[:k]) + ")]",
                                       kind="span", verdict=verdict,
                                       max_residual=chk.max_residual))
        passed = passed and chk.passed
    min_det = np.inf
    if len(fields) == fields[0].chart.dim:
        for pt in samples:
            det = abs(np.linalg.det(_field_matrix(fields, pt)))
            min_det = min(min_det, det)
    return SolvableStructureReport(field_labels=labels, relations=relations,
                                   independence_min_det=float(min_det),
                                   independence_min_rel_sv=float(min_rel_sv),
                                   max_residual=float(max_resid), tol=tol,
                                   n_samples=len(samples), passed=passed,
                                   samples=list(samples))


def structure_fields(system: HamiltonianSystem):
    """Assemble (labels, [A, X_F_1.., X_G_1..]) on the extended chart."""
    ech = system.extended()
    fields = [time_evolution_field(system.hamiltonian, ech)]
    labels = ["A"]
    for i, F in enumerate(system.integrals):
        fields.append(hamiltonian_vector_field(F, ech))
        labels.append(f"X_F{i+1}")
    for i, G in enumerate(system.g_functions or ()):
        fields.append(hamiltonian_vector_field(G, ech))
        labels.append(f"X_G{i+1}")
    return tuple(labels), fields


def _zero_field_verdict(X: VectorField) -> Verdict:
    worst = Verdict.PROVEN_ZERO
    for c in X.coeffs:
        v = se.is_zero(c)
        if v is Verdict.PROVEN_NONZERO:
            return v
        if v is Verdict.UNKNOWN:
            worst = Verdict.UNKNOWN
        elif v is Verdict.NUMERICALLY_ZERO and worst is Verdict.PROVEN_ZERO:
            worst = v
    return worst


def build_canonical_structure(system: HamiltonianSystem,
                              samples: Optional[Sequence[Mapping[str, float]]] = None,
                              tol: float = DEFAULT_TOL,
                              n_samples: int = 200,
                              seed: int = DEFAULT_SEED) -> SolvableStructureReport:
    """Assemble and certify the canonical structure {A, X_F_i, X_G_i}.

    The exactly-zero brackets get symbolic verdicts; the f/h span relations
    are fitted by least squares at every sample.  In an action-angle chart
    with a separated g-matrix the span coefficients are also produced
    symbolically.
    """
    n = system.n
    if system.g_functions is None and not system.action_angle:
        raise SystemError("G-functions are required (or an action-angle chart with g-matrix)")
    if system.action_angle and system.g_functions is None:
        system = _with_separated_g(system)
    labels, fields = structure_fields(system)
    A, XF, XG = fields[0], fields[1:1 + n], fields[1 + n:]
    if samples is None:
        samples = system.sample_points(n_samples, seed=seed)
    samples = list(samples)

    relations = []
    max_resid = 0.0
    passed = True

    def record_zero(label, X):
        nonlocal passed
        v = _zero_field_verdict(X)
        ok = v.zero
        relations.append(RelationCheck(label=label, kind="zero",
                                       verdict=v.value, max_residual=0.0))
        passed = passed and ok

    for i in range(n):
        record_zero(f"[X_F{i+1}, A]", lie_bracket(XF[i], A))
        for j in range(i + 1, n):
            record_zero(f"[X_F{i+1}, X_F{j+1}]", lie_bracket(XF[i], XF[j]))
    for i in range(n):
        for j in range(i + 1, n):
            record_zero(f"[X_G{i+1}, X_G{j+1}]", lie_bracket(XG[i], XG[j]))

    sym_f, sym_h = (None, None)
    if system.action_angle and system.g_matrix is not None:
        sym_f, sym_h = action_angle_span_coefficients(system)

    f_tables = {}
    h_tables = {}

    def record_span(label, bracket, key, table, symbolic):
        nonlocal passed, max_resid
        rows = np.zeros((len(samples), n))
        worst = 0.0
        for si, pt in enumerate(samples):
            c, resid = solve_span_coefficients(bracket, XF, pt)
            rows[si] = c
            worst = max(worst, resid)
        table[key] = rows
        max_resid = max(max_resid, worst)
        ok = worst <= tol
        relations.append(RelationCheck(label=label, kind="span",
                                       verdict="pass" if ok else "fail",
                                       max_residual=worst, coefficients=rows,
                                       symbolic=symbolic))
        passed = passed and ok

    for i in range(n):
        for j in range(n):
            record_span(f"[X_G{i+1}, X_F{j+1}] = sum_l f^l X_F_l",
                        lie_bracket(XG[i], XF[j]), (i, j), f_tables,
                        None if sym_f is None else sym_f[(i, j)])
    for i in range(n):
        record_span(f"[X_G{i+1}, A] = sum_l h_l X_F_l",
                    lie_bracket(XG[i], A), i, h_tables,
                    None if sym_h is None else sym_h[i])

    min_det = np.inf
    min_rel_sv = np.inf
    for pt in samples:
        M = _field_matrix(fields, pt)
        min_det = min(min_det, abs(np.linalg.det(M)))
        min_rel_sv = min(min_rel_sv, _direction_rel_sv(M))
    if min_rel_sv <= INDEPENDENCE_RTOL:
        passed = False

    return SolvableStructureReport(field_labels=labels, relations=relations,
                                   independence_min_det=float(min_det),
                                   independence_min_rel_sv=float(min_rel_sv),
                                   max_residual=float(max_resid), tol=tol,
                                   n_samples=len(samples), passed=passed,
                                   f_tables=f_tables, h_tables=h_tables,
                                   samples=samples)


def _with_separated_g(system: HamiltonianSystem) -> HamiltonianSystem:
    """Fill in G_i = sum_j g_ij(P) Q_j for an action-angle chart."""
    g = system.g_matrix
    if g is None:
        raise SystemError("a g-matrix is required to build separated G-functions")
    n = system.n
    Gs = []
    for i in range(n):
        Gs.append(se.add(*[se.mul(g[i][j], se.sym(system.chart.q[j])) for j in range(n)]))
    return HamiltonianSystem(chart=system.chart, hamiltonian=system.hamiltonian,
                             integrals=system.integrals, g_functions=tuple(Gs),
                             singular=system.singular, box=system.box,
                             parameters=system.parameters, name=system.name,
                             action_angle=True, g_matrix=system.g_matrix)


# ---------------------------------------------------------------------------
# action-angle (separated) coefficient solve and g-matrix checks


def _sym_det(m):
    k = len(m)
    if k == 0:
        return se.ONE
    if k == 1:
        return m[0][0]
    out = []
    for j in range(k):
        minor = [row[:j] + row[j + 1:] for row in m[1:]]
        term = se.mul(m[0][j], _sym_det(minor))
        if j % 2:
            term = se.mul(se.MINUS_ONE, term)
        out.append(term)
    return se.add(*out)


def _sym_matrix_inverse(m):
    k = len(m)
    det = se.simplify(_sym_det(m))
    if det is se.ZERO:
        raise SystemError("matrix is singular")
    inv = [[None] * k for _ in range(k)]
    for i in range(k):
        for j in range(k):
            minor = [row[:i] + row[i + 1:] for idx, row in enumerate(m) if idx != j]
            c = _sym_det(minor)
            if (i + j) % 2:
                c = se.mul(se.MINUS_ONE, c)
            inv[i][j] = se.simplify(se.mul(c, se.pow_(det, -1)))
    return inv


def action_angle_span_coefficients(system: HamiltonianSystem):
    """Symbolic f^l_ij and h_il for a separated structure in (Q, P) variables."""
    if not system.action_angle or system.g_matrix is None:
        raise SystemError("an action-angle chart with a g-matrix is required")
    n = system.n
    P = list(system.chart.p)
    g = system.g_matrix
    DF = [[se.differentiate(F, Pk) for Pk in P] for F in system.integrals]
    DFT_inv = _sym_matrix_inverse([[DF[j][i] for j in range(n)] for i in range(n)])
    f_sym = {}
    for i in range(n):
        for j in range(n):
            V = []
            for k in range(n):
                inner = se.add(*[se.mul(g[i][l], se.differentiate(system.integrals[j], P[l]))
                                 for l in range(n)])
                V.append(se.mul(se.MINUS_ONE, se.differentiate(inner, P[k])))
            f_sym[(i, j)] = tuple(se.simplify(se.add(*[se.mul(DFT_inv[l][k], V[k])
                                                       for k in range(n)]))
                                  for l in range(n))
    h_sym = {}
    for i in range(n):
        W = []
        inner = se.add(*[se.mul(g[i][k], se.differentiate(system.hamiltonian, P[k]))
                         for k in range(n)])
        for j in range(n):
            W.append(se.mul(se.MINUS_ONE, se.differentiate(inner, P[j])))
        h_sym[i] = tuple(se.simplify(se.add(*[se.mul(DFT_inv[l][k], W[k]) for k in range(n)]))
                         for l in range(n))
    return f_sym, h_sym


@dataclass
class GMatrixReport:
    passed: bool
    relation_verdicts: dict
    min_abs_det: float


def check_g_matrix(g, momenta: Sequence[str],
                   samples: Optional[Sequence[Mapping[str, float]]] = None,
                   seed: int = DEFAULT_SEED) -> GMatrixReport:
    """Check the commuting-solution conditions and det g != 0 for g(P).

    Entries must depend only on the momentum coordinates; the compatibility
    system sum_k (g_ik d g_jl/dP_k - g_jk d g_il/dP_k) = 0 must hold for all
    i, j, l with zero verdicts.
    """
    n = len(g)
    momenta = list(momenta)
    allowed = set(momenta)
    for row in g:
        for entry in row:
            extra = se.free_symbols(entry) - allowed
            if extra:
                raise SystemError(f"g-matrix entry depends on non-momentum "
                                  f"coordinates {sorted(extra)}")
    verdicts = {}
    passed = True
    for i in range(n):
        for j in range(n):
            for l in range(n):
                expr = se.add(*[
                    se.add(se.mul(g[i][k], se.differentiate(g[j][l], momenta[k])),
                           se.mul(se.MINUS_ONE, g[j][k],
                                  se.differentiate(g[i][l], momenta[k])))
                    for k in range(n)])
                v = se.is_zero(expr)
                verdicts[(i, j, l)] = v.value
                passed = passed and v.zero
    det = se.simplify(_sym_det([list(row) for row in g]))
    if samples is None:
        rng = np.random.default_rng(seed)
        samples = [{nm: float(rng.uniform(0.5, 2.0)) for nm in momenta} for _ in range(16)]
    min_det = np.inf
    for pt in samples:
        try:
            min_det = min(min_det, abs(se.evaluate(det, pt)))
        except se.EvaluationError:
            continue
    if not (min_det > 0):
        passed = False
    return GMatrixReport(passed=passed, relation_verdicts=verdicts,
                         min_abs_det=float(min_det))
