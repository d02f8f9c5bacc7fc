"""Method of Moving Asymptotes for one inequality constraint, plus the
five-step-average convergence test.

The MMA subproblem is the usual separable convex approximation with an
elastic variable ``y`` on the constraint (``a0 = 1, a = 0, c = 1000,
d = 1``). With a single constraint its dual is a concave function of one
multiplier, which is maximised by bisection on the (monotone) dual
gradient; the primal point then follows in closed form.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

ASYINIT = 0.5
ASYINCR = 1.2
ASYDECR = 0.7
ALBEFA = 0.1
RAA0 = 1e-5
ASYMIN = 1e-5   # closest asymptote distance, fraction of the variable range
C_ELASTIC = 1000.0
D_ELASTIC = 1.0


@dataclass
class MmaState:
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    xold1: np.ndarray | None = None
    xold2: np.ndarray | None = None
    iteration: int = 0
    move: np.ndarray | float = 0.1
    multiplier: float = 0.0


def _asymptotes(state: MmaState, x, xmin, xmax):
    span = xmax - xmin
    if state.iteration < 2 or state.lower is None:
        low = x - ASYINIT * span
        upp = x + ASYINIT * span
    else:
        trend = (x - state.xold1) * (state.xold1 - state.xold2)
        factor = np.where(trend > 0, ASYINCR, np.where(trend < 0, ASYDECR, 1.0))
        low = x - factor * (state.xold1 - state.lower)
        upp = x + factor * (state.upper - state.xold1)
        low = np.clip(low, x - 10.0 * span, x - ASYMIN * span)
        upp = np.clip(upp, x + ASYMIN * span, x + 10.0 * span)
    return low, upp


def _approx_terms(df, x, low, upp, span, regularize=True):
    # the small convexity term goes on the objective only, so scaling the
    # constraint by a positive factor leaves the subproblem optimum unchanged
    dpos = np.maximum(df, 0.0)
    dneg = np.maximum(-df, 0.0)
    reg = RAA0 / span if regularize else 0.0
    p = (upp - x) ** 2 * (1.001 * dpos + 0.001 * dneg + reg)
    q = (x - low) ** 2 * (0.001 * dpos + 1.001 * dneg + reg)
    return p, q


def _primal(lam, p0, q0, p1, q1, low, upp, alpha, beta):
    P = np.sqrt(p0 + lam * p1)
    Q = np.sqrt(q0 + lam * q1)
    x = (P * low + Q * upp) / (P + Q)
    return np.clip(x, alpha, beta)


def mma_update(state: MmaState, x, f0, df0, g, dg, bounds) -> np.ndarray:
    """One MMA step. ``g`` is the scalar constraint value (<= 0 feasible)
    and ``dg`` its gradient; ``bounds`` is ``(xmin, xmax)``."""
    x = np.asarray(x, dtype=float)
    df0 = np.asarray(df0, dtype=float)
    dg = np.asarray(dg, dtype=float)
    xmin, xmax = (np.asarray(b, dtype=float) for b in bounds)
    for name, arr in (("x", x), ("f0", f0), ("df0", df0), ("g", g), ("dg", dg)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in MMA input {name}")
    if x.shape != df0.shape or x.shape != dg.shape or x.shape != xmin.shape:
        raise ValueError("MMA inputs have inconsistent shapes")

    span = np.maximum(xmax - xmin, 1e-12)
    low, upp = _asymptotes(state, x, xmin, xmax)
    move = np.broadcast_to(np.asarray(state.move, dtype=float), x.shape)
    alpha = np.maximum.reduce([xmin, low + ALBEFA * (x - low), x - move])
    beta = np.minimum.reduce([xmax, upp - ALBEFA * (upp - x), x + move])

    p0, q0 = _approx_terms(df0, x, low, upp, span)
    p1, q1 = _approx_terms(dg, x, low, upp, span, regularize=False)
    rhs = float(np.sum(p1 / (upp - x) + q1 / (x - low)) - g)

    def dual_grad(lam):
        xl = _primal(lam, p0, q0, p1, q1, low, upp, alpha, beta)
        y = max(0.0, (lam - C_ELASTIC) / D_ELASTIC)
        return float(np.sum(p1 / (upp - xl) + q1 / (xl - low))) - y - rhs, xl

    h0, xnew = dual_grad(0.0)
    lam = 0.0
    if h0 > 0.0:
        lo_l, hi_l = 0.0, 1.0
        while dual_grad(hi_l)[0] > 0.0:
            lo_l, hi_l = hi_l, 2.0 * hi_l
        for _ in range(200):
            mid = 0.5 * (lo_l + hi_l)
            if mid <= lo_l or mid >= hi_l:
                break
            if dual_grad(mid)[0] > 0.0:
                lo_l = mid
            else:
                hi_l = mid
        lam = 0.5 * (lo_l + hi_l)
        xnew = dual_grad(lam)[1]

    state.xold2 = None if state.xold1 is None else state.xold1.copy()
    state.xold1 = x.copy()
    state.lower, state.upper = low, upp
    state.iteration += 1
    state.multiplier = lam
    return np.clip(xnew, xmin, xmax)


@dataclass
class ConvergenceWindow:
    size: int = 5
    objectives: deque = field(default_factory=lambda: deque(maxlen=5))
    volumes: deque = field(default_factory=lambda: deque(maxlen=5))
    count: int = 0

    def __post_init__(self):
        self.objectives = deque(self.objectives, maxlen=self.size)
        self.volumes = deque(self.volumes, maxlen=self.size)

    def push(self, c: float, v: float) -> None:
        self.objectives.append(float(c))
        self.volumes.append(float(v))
        self.count += 1


def check_convergence(window: ConvergenceWindow, v_bar: float, tol: float = 5e-4) -> bool:
    """Objective and volume within ``tol`` of their last-five means and the
    current volume feasible."""
    if window.count < window.size:
        return False
    c = window.objectives[-1]
    v = window.volumes[-1]
    c_mean = float(np.mean(window.objectives))
    v_mean = float(np.mean(window.volumes))
    return (
        abs(c - c_mean) / abs(c_mean) <= tol
        and v <= v_bar
        and abs(v - v_mean) / abs(v_mean) <= tol
    )
