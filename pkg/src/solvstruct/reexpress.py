"""Certified re-expression of functions in terms of invariants.

Workflow: fit coefficients of a small monomial basis numerically at sample
points, snap them to rationals, then certify the candidate symbolically with
a zero verdict.  The numeric fit only ever proposes; the certificate decides.
"""

from __future__ import annotations

from fractions import Fraction
from itertools import product
from typing import Mapping, Sequence

import numpy as np

from . import symexpr as se
from .symexpr import Expression

__all__ = ["ReExpressionError", "rationalize", "express_in_basis", "fit_span"]


class ReExpressionError(Exception):
    pass


def rationalize(x: float, tol: float = 1e-8, max_den: int = 10 ** 6):
    """Snap a float to a nearby small rational; None when nothing is close."""
    if abs(x) < tol:
        return Fraction(0)
    f = Fraction(x).limit_denominator(max_den)
    if abs(float(f) - x) <= tol * max(1.0, abs(x)):
        return f
    return None


def _monomials(k: int, degree: int):
    out = []
    for exps in product(range(degree + 1), repeat=k):
        if 0 < sum(exps) <= degree or sum(exps) == 0:
            out.append(exps)
    out.sort(key=lambda e: (sum(e), e))
    return out


def express_in_basis(target: Expression,
                     atoms: Sequence[tuple],
                     points: Sequence[Mapping[str, float]],
                     degree: int = 2,
                     fit_tol: float = 1e-7) -> Expression:
    """Write `target` as a rational-coefficient polynomial in the atoms.

    `atoms` is a sequence of (new_expression, old_expression) pairs: the old
    side is evaluated on the sample points together with the target, and the
    certified result is returned on the new side.  Raises when the fit fails
    or the symbolic certificate does not come back zero.
    """
    if len(points) < 4:
        raise ReExpressionError("too few sample points for a stable fit")
    k = len(atoms)
    monos = _monomials(k, degree)
    rows = []
    rhs = []
    for pt in points:
        try:
            vals = [se.evaluate(old, pt) for _, old in atoms]
            y = se.evaluate(target, pt)
        except se.EvaluationError:
            continue
        rows.append([np.prod([v ** e for v, e in zip(vals, exps)]) for exps in monos])
        rhs.append(y)
    if len(rows) < max(4, len(monos)):
        raise ReExpressionError("too many sample points rejected during the fit")
    A = np.asarray(rows)
    b = np.asarray(rhs)
    coeffs, *_ = np.linalg.lstsq(A, b, rcond=None)
    resid = float(np.max(np.abs(A @ coeffs - b))) if len(b) else 0.0
    if resid > fit_tol * max(1.0, float(np.max(np.abs(b)))):
        raise ReExpressionError(f"linear fit residual too large ({resid:.3e})")

    new_terms = []
    old_terms = []
    for c, exps in zip(coeffs, monos):
        frac = rationalize(float(c))
        if frac is None:
            raise ReExpressionError(f"coefficient {c!r} does not look rational")
        if frac == 0:
            continue
        new_terms.append(se.mul(se.num(frac),
                                *[se.pow_(a, e) for (a, _), e in zip(atoms, exps) if e]))
        old_terms.append(se.mul(se.num(frac),
                                *[se.pow_(o, e) for (_, o), e in zip(atoms, exps) if e]))
    candidate_old = se.add(*old_terms) if old_terms else se.ZERO
    verdict = se.is_zero(target - candidate_old)
    if not verdict.zero:
        raise ReExpressionError(f"certificate failed: residual verdict {verdict.value}")
    return se.add(*new_terms) if new_terms else se.ZERO


def fit_span(target_vec: np.ndarray, basis_mat: np.ndarray):
    """Least-squares span fit: coefficients c with basis c ~ target.

    The residual is normalized by max(1, |target|) so that span membership
    is judged on the same scale regardless of how large the coefficients of
    the fields grow near singular sets.
    """
    coeffs, *_ = np.linalg.lstsq(basis_mat, target_vec, rcond=None)
    scale = max(1.0, float(np.linalg.norm(target_vec)))
    residual = float(np.linalg.norm(basis_mat @ coeffs - target_vec)) / scale
    return coeffs, residual
