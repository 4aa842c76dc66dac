"""Damped Gauss-Newton least squares shared by the pose and keypoint refiners.

Both refiners use the same acceptance schedule: a trial step is accepted only
if it strictly decreases the objective, damping shrinks by 10x on acceptance
and grows by 10x on rejection. This guarantees a non-increasing objective
trace, which downstream invariants rely on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

REL_TOL_DEFAULT = 1e-10
MU_INITIAL = 1e-3
MU_GROWTH = 10.0
MU_SHRINK = 0.1
MU_FLOOR = 1e-12
MU_CEILING = 1e15


@dataclass
class LeastSquaresResult:
    x: Any
    objective_trace: list[float]
    converged: bool
    iterations: int


def damped_least_squares(
    x0: Any,
    system: Callable[[Any], tuple[np.ndarray, np.ndarray]],
    apply_step: Callable[[Any, np.ndarray], Any],
    objective: Callable[[Any], float],
    *,
    max_iterations: int,
    rel_tol: float = REL_TOL_DEFAULT,
) -> LeastSquaresResult:
    """Minimize ``objective`` by damped Gauss-Newton steps.

    ``system(x)`` returns the Jacobian ``J`` (m, k) and residual ``r`` (m,) of
    the differentiable part of the objective at ``x``; ``apply_step(x, delta)``
    retracts a step ``delta`` (k,) onto the parameter space. The objective may
    include constant penalty terms not represented in the residuals.

    Stops when an accepted step's relative decrease falls below ``rel_tol``,
    when the objective reaches zero, or when no decreasing step exists at the
    damping ceiling (counted as converged: the achievable decrease is zero).
    Returns ``converged=False`` only if the iteration cap was hit while steps
    were still making progress.
    """
    f = float(objective(x0))
    trace = [f]
    x = x0
    if not np.isfinite(f):
        return LeastSquaresResult(x, trace, False, 0)
    if f == 0.0:
        return LeastSquaresResult(x, trace, True, 0)

    mu = MU_INITIAL
    iterations = 0
    converged = False
    for _ in range(max_iterations):
        iterations += 1
        jac, res = system(x)
        hess = jac.T @ jac
        grad = jac.T @ res
        k = hess.shape[0]
        eye = np.eye(k)

        rel_decrease = None
        while True:
            try:
                delta = np.linalg.solve(hess + mu * eye, -grad)
            except np.linalg.LinAlgError:
                delta = None
            if delta is not None:
                x_new = apply_step(x, delta)
                f_new = float(objective(x_new))
            if delta is None or not f_new < f:
                mu *= MU_GROWTH
                if mu > MU_CEILING:
                    # No strictly decreasing step exists: the relative
                    # decrease is zero, which meets any positive tolerance.
                    return LeastSquaresResult(x, trace, True, iterations)
                continue
            rel_decrease = (f - f_new) / f
            x, f = x_new, f_new
            trace.append(f)
            mu = max(mu * MU_SHRINK, MU_FLOOR)
            break

        if f == 0.0 or rel_decrease < rel_tol:
            converged = True
            break

    return LeastSquaresResult(x, trace, converged, iterations)
