"""Penalty continuation for box- and inequality-constrained smooth problems.

Solves ``min f(x)  s.t.  c(x) = 0, g(x) <= 0, lo <= x <= hi`` by minimizing a
sequence of penalized merit functions with L-BFGS-B (boxes are handled
natively).  Each round adds multiplier estimates (PHR form) so the required
feasibility can be reached without driving the weight to ill-conditioned
values; the weight grows by ``growth`` whenever the violation stalls.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize


@dataclass
class Constraints:
    """Constraint values at one point plus the vector-Jacobian product there."""

    eq: np.ndarray
    ineq: np.ndarray
    vjp: Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class PenaltyResult:
    x: np.ndarray
    f: float
    violation: float
    stationarity: float
    eq_multipliers: np.ndarray
    ineq_multipliers: np.ndarray
    rounds: int
    inner_iterations: int
    converged: bool


def violation(cons: Constraints) -> float:
    v = 0.0
    if cons.eq.size:
        v = float(np.max(np.abs(cons.eq)))
    if cons.ineq.size:
        v = max(v, float(np.max(cons.ineq)))
    return max(v, 0.0)


def merit(x, objective, constraints, lam, nu, weight):
    """PHR merit value and gradient at ``x``."""
    f, gf = objective(x)
    cons = constraints(x)
    a = lam + weight * cons.eq
    b = np.maximum(0.0, nu + weight * cons.ineq)
    value = (f + lam @ cons.eq + 0.5 * weight * (cons.eq @ cons.eq)
             + (b @ b - nu @ nu) / (2.0 * weight))
    return value, gf + cons.vjp(a, b)


def projected_gradient(x, grad, lo, hi) -> float:
    step = np.clip(x - grad, lo, hi) - x
    return float(np.max(np.abs(step))) if step.size else 0.0


def solve(objective, constraints, x0, lo, hi, *, feas_tol=1e-6, opt_tol=1e-6,
          max_outer=50, max_inner=500, weight=10.0, growth=10.0,
          max_weight=1e10) -> PenaltyResult:
    """Minimize ``objective`` subject to ``constraints`` inside the box ``[lo, hi]``.

    ``objective(x)`` returns ``(f, grad)``; ``constraints(x)`` returns a
    :class:`Constraints`.  Infinite box entries mean "unbounded".
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    x = np.clip(np.asarray(x0, dtype=float), lo, hi)
    bounds = list(zip(np.where(np.isfinite(lo), lo, None), np.where(np.isfinite(hi), hi, None)))
    cons = constraints(x)
    lam = np.zeros(cons.eq.size)
    nu = np.zeros(cons.ineq.size)
    prev = violation(cons)
    inner = 0
    viol, stat = prev, np.inf
    for rnd in range(1, max_outer + 1):
        res = minimize(merit, x, args=(objective, constraints, lam, nu, weight), jac=True,
                       method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": max_inner, "ftol": 1e-15, "gtol": 0.1 * opt_tol,
                                "maxcor": 20})
        x = np.clip(res.x, lo, hi)
        inner += int(res.nit)
        cons = constraints(x)
        lam = lam + weight * cons.eq
        nu = np.maximum(0.0, nu + weight * cons.ineq)
        viol = violation(cons)
        _, gf = objective(x)
        stat = projected_gradient(x, gf + cons.vjp(lam, nu), lo, hi)
        if viol <= feas_tol and stat <= opt_tol:
            return PenaltyResult(x, objective(x)[0], viol, stat, lam, nu, rnd, inner, True)
        if viol > feas_tol and viol > 0.25 * prev:
            weight = min(weight * growth, max_weight)
        prev = viol
    return PenaltyResult(x, objective(x)[0], viol, stat, lam, nu, max_outer, inner, False)
