"""Numerical oracle: fixed-step RK4, drift diagnostics, box sampling.

Kept deliberately independent of the symbolic verification paths so that
closed forms, quadrature descents and structure certificates can be checked
against plain numerical integration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import symexpr as se
from .exterior import Chart

__all__ = [
    "Trajectory", "IntegrationError", "SamplingError",
    "integrate_rk4", "compare_trajectories", "sample_box",
    "trajectory_to_csv", "SINGULAR_GUARD",
]

SINGULAR_GUARD = 1e-2


class IntegrationError(Exception):
    pass


class SamplingError(Exception):
    pass


@dataclass
class Trajectory:
    """Time-stamped phase-space samples with conserved-quantity drift."""

    chart: Chart
    times: np.ndarray          # strictly increasing, shape (m,)
    states: np.ndarray         # shape (m, 2n)
    step: float
    integral_names: tuple = ()
    integrals: Optional[np.ndarray] = None   # shape (m, k)
    truncated: bool = False    # hit a singular-set guard before t_end

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise IntegrationError("trajectory times must be strictly increasing")
        if self.states.shape != (len(self.times), len(self.chart.q) * 2):
            raise IntegrationError("state dimension must be 2n")

    def state_at(self, t: float, atol: float = 1e-9):
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > max(atol, self.step / 2):
            raise IntegrationError(f"time {t} not on the stored grid")
        return self.times[i], self.states[i]

    def drift(self) -> np.ndarray:
        """Absolute conserved-quantity drift |F_k(t) - F_k(t0)| per sample."""
        if self.integrals is None:
            return np.zeros((len(self.times), 0))
        return np.abs(self.integrals - self.integrals[0])

    def drift_rate(self) -> float:
        """Max relative drift per unit time over the trajectory."""
        if self.integrals is None or len(self.times) < 2:
            return 0.0
        dt = self.times[1:] - self.times[0]
        scale = np.maximum(np.abs(self.integrals[0]), 1.0)
        rel = self.drift()[1:] / scale
        return float(np.max(rel / dt[:, None])) if rel.size else 0.0


def _phase_names(chart: Chart):
    return tuple(chart.q) + tuple(chart.p)


def _singular_guards(system) -> list:
    out = []
    names = _phase_names(system.chart)
    for expr in getattr(system, "singular", ()) or ():
        out.append(se.compile_scalar(expr, names))
    return out


def _min_guard(guards, state) -> float:
    vals = []
    for g in guards:
        try:
            vals.append(abs(g(*state)))
        except Exception:
            vals.append(0.0)
    return min(vals) if vals else math.inf


def integrate_rk4(system, x0: Sequence[float], t_span, h: float,
                  guard: float = SINGULAR_GUARD) -> Trajectory:
    """Classical fixed-step RK4 for Hamilton's equations.

    Records every integral of motion along the way; if the orbit comes
    within `guard` of a declared singular set the trajectory is returned
    truncated at the last safe step.
    """
    if h <= 0:
        raise IntegrationError("step size must be positive")
    t0, t1 = (0.0, float(t_span)) if np.isscalar(t_span) else (float(t_span[0]), float(t_span[1]))
    if t1 < t0:
        raise IntegrationError("t_span must be forward in time")
    chart = system.chart
    names = _phase_names(chart)
    if len(x0) != len(names):
        raise IntegrationError(f"state must have dimension {len(names)}")

    xdot = se.compile_vector(
        [system.hamiltonian_vector_field_coefficient(nm) for nm in names], names)
    f_funcs = [se.compile_scalar(F, names) for F in system.integrals]
    guards = _singular_guards(system)

    x = [float(v) for v in x0]
    if _min_guard(guards, x) <= guard:
        raise IntegrationError("initial state is inside a singular-set guard zone")

    def rhs(state):
        return xdot(*state)

    times = [t0]
    states = [list(x)]
    truncated = False
    t = t0
    while t < t1 - 1e-15:
        dt = min(h, t1 - t)
        k1 = rhs(x)
        k2 = rhs([xi + 0.5 * dt * ki for xi, ki in zip(x, k1)])
        k3 = rhs([xi + 0.5 * dt * ki for xi, ki in zip(x, k2)])
        k4 = rhs([xi + dt * ki for xi, ki in zip(x, k3)])
        x = [xi + dt / 6.0 * (a + 2 * b + 2 * c + d)
             for xi, a, b, c, d in zip(x, k1, k2, k3, k4)]
        t = t1 if t + dt >= t1 - 1e-15 else t + dt
        if _min_guard(guards, x) <= guard:
            truncated = True
            break
        times.append(t)
        states.append(list(x))

    states_arr = np.asarray(states)
    integrals = np.array([[f(*s) for f in f_funcs] for s in states]) if f_funcs else None
    return Trajectory(chart=chart, times=np.asarray(times), states=states_arr, step=h,
                      integral_names=tuple(f"F{i+1}" for i in range(len(f_funcs))),
                      integrals=integrals, truncated=truncated)


def compare_trajectories(traj: Trajectory, solution, times=None) -> float:
    """Max sup-norm deviation between a trajectory and a closed-form solution.

    `solution` must provide ``state(t) -> sequence``; times default to every
    stored sample.  Requested times must lie on the stored grid.
    """
    if times is None:
        ts = traj.times
        xs = traj.states
    else:
        pairs = [traj.state_at(t) for t in times]
        lo, hi = traj.times[0], traj.times[-1]
        for t in times:
            if t < lo - 1e-12 or t > hi + 1e-12:
                raise IntegrationError(f"time {t} outside trajectory range")
        ts = np.array([p[0] for p in pairs])
        xs = np.array([p[1] for p in pairs])
    worst = 0.0
    for t, x in zip(ts, xs):
        ref = solution.state(float(t))
        worst = max(worst, max(abs(a - b) for a, b in zip(x, ref)))
    return worst


def sample_box(chart: Chart, bounds: Mapping[str, tuple], count: int, seed: int,
               singular: Sequence[se.Expression] = (), eps: float = SINGULAR_GUARD):
    """Deterministic uniform samples in a box, filtered away from singular sets.

    `singular` holds expressions whose absolute value approximates the
    distance to the singular locus; points with any |expr| <= eps are
    rejected.  Fails when the rejection rate exceeds 99%.
    """
    rng = np.random.default_rng(seed)
    names = [nm for nm in chart.names]
    for nm in names:
        if nm not in bounds:
            raise SamplingError(f"no sampling bounds for coordinate '{nm}'")
        lo, hi = bounds[nm]
        if not (lo <= hi):
            raise SamplingError(f"bounds for '{nm}' are not ordered")
    guards = [se.compile_scalar(s, names) for s in singular]
    points = []
    attempts = 0
    while len(points) < count:
        attempts += 1
        if attempts > max(100, count * 100):
            raise SamplingError("rejection rate above 99%: box degenerate against singular set")
        pt = {nm: float(rng.uniform(*bounds[nm])) for nm in names}
        vals = [pt[nm] for nm in names]
        ok = True
        for g in guards:
            try:
                if abs(g(*vals)) <= eps:
                    ok = False
                    break
            except Exception:
                ok = False
                break
        if ok:
            points.append(pt)
    return points


def trajectory_to_csv(traj: Trajectory, out) -> None:
    """CSV export: header t,q1..qn,p1..pn,F1..Fn, full double precision."""
    names = _phase_names(traj.chart)
    header = ["t", *names, *traj.integral_names]
    out.write(",".join(header) + "\n")
    for i, t in enumerate(traj.times):
        row = [f"{t:.17g}"] + [f"{v:.17g}" for v in traj.states[i]]
        if traj.integrals is not None:
            row += [f"{v:.17g}" for v in traj.integrals[i]]
        out.write(",".join(row) + "\n")
