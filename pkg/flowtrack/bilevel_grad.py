"""Backward pass of the differentiable flow layer.

Implicit differentiation of the smoothed optimality condition
B^T (t c + grad P(x*)) = 0 gives

    dL/dc = -t B H^{-1} B^T dL/dx,    H = B^T diag(P''(x*)) B.

H is factorized once (Cholesky) and the factor is kept on the result so any
further vector can be pulled back through the same solution for free.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np
import scipy.linalg

from flowtrack.common import SolverError
from flowtrack.flow_graph import FlowGraph
from flowtrack.smoothed_lp import (
    NewtonOptions,
    SmoothedSolution,
    barrier_terms,
    factorize,
    reduced_hessian,
    solve_smoothed,
)


@dataclass(frozen=True, eq=False)
class GradResult:
    dl_dc: np.ndarray
    factor: Any
    graph: FlowGraph
    temperature: float

    def pullback(self, dl_dx: np.ndarray) -> np.ndarray:
        """dL/dc for another dL/dx at the same solution, reusing the factor."""
        return _pullback(self.graph, self.factor, self.temperature, dl_dx)


def _pullback(graph: FlowGraph, factor, t: float, dl_dx: np.ndarray) -> np.ndarray:
    dl_dx = np.asarray(dl_dx, dtype=float)
    if dl_dx.shape != (graph.m,):
        raise SolverError(f"dL/dx has shape {dl_dx.shape}, graph needs ({graph.m},)")
    w = scipy.linalg.cho_solve(factor, graph.B.T @ dl_dx, check_finite=False)
    return -t * (graph.B @ w)


def grad_costs(graph: FlowGraph, solution: SmoothedSolution, dl_dx: np.ndarray) -> GradResult:
    if not solution.converged:
        raise SolverError(
            f"backward pass needs a converged forward solve (grad norm {solution.grad_norm:.3e})"
        )
    _, _, hess = barrier_terms(graph, solution.x)
    factor = factorize(reduced_hessian(graph, hess))
    t = solution.temperature
    return GradResult(
        dl_dc=_pullback(graph, factor, t, dl_dx),
        factor=factor,
        graph=graph,
        temperature=t,
    )


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    """Componentwise |a - n| / max(|a|, |n|, floor * scale).

    ``scale`` is the largest magnitude in either vector (at least 1), so
    components below ``floor * scale`` are compared absolutely: with the
    default floor a component of size 1e-6 on a unit-scale gradient passes
    a 1e-4 tolerance at any relative error under 1%. Gradient checks record
    the floor they used next to their tolerance.
    """
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    scale = max(1.0, float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor * scale)


def central_difference(f: Callable[[float], float], delta: float) -> float:
    """Richardson-extrapolated central difference of f at 0, O(delta^4) truncation."""
    coarse = (f(delta) - f(-delta)) / (2.0 * delta)
    half = 0.5 * delta
    fine = (f(half) - f(-half)) / delta
    return (4.0 * fine - coarse) / 3.0


def finite_difference_costs(
    graph: FlowGraph,
    costs: np.ndarray,
    loss: Callable[[np.ndarray], float],
    options: NewtonOptions | None = None,
    *,
    delta: float = 1e-4,
    indices: range | list[int] | None = None,
) -> np.ndarray:
    """Finite differences of loss(x*(c)) w.r.t. each cost, re-solving the forward pass."""
    costs = np.asarray(costs, dtype=float)
    indices = range(graph.m) if indices is None else indices
    grad = np.zeros(graph.m)
    for k in indices:
        def bumped_loss(step: float, k: int = k) -> float:
            bumped = costs.copy()
            bumped[k] += step
            return loss(solve_smoothed(graph, bumped, options).x)

        grad[k] = central_difference(bumped_loss, delta)
    return grad
