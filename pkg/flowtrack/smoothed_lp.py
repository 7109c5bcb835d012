"""Forward pass of the differentiable flow layer.

Solves the log-barrier smoothed LP

    min_z  t * c^T x(z) + P(x(z)),   x(z) = x0 + B z,   t = M / epsilon

with damped Newton steps. Because A = [I; -I] the barrier is separable:
P(x) = -sum(log x + log(1 - x)), so its Hessian is diagonal and the reduced
Hessian is H = B^T diag(P'') B, which is symmetric positive definite at every
interior point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from flowtrack.common import ConfigError, ConvergenceError, SolverError
from flowtrack.flow_graph import FlowGraph

# Below this Newton decrement the objective is flat to rounding and Armijo
# comparisons stop being meaningful.
_FLAT_DECREMENT = 1e-14
_MAX_BACKTRACKS = 60


@dataclass(frozen=True)
class NewtonOptions:
    epsilon: float = 0.1
    tolerance: float = 1e-8
    max_iterations: int = 100
    shrink: float = 0.5
    sufficient_decrease: float = 1e-4
    boundary_margin: float = 1e-12
    # Largest share of the distance to the box boundary one step may cover.
    boundary_fraction: float = 0.995
    epsilon_schedule: tuple[float, ...] = ()

    def validate(self, prefix: str = "newton") -> None:
        for name in ("epsilon", "tolerance", "shrink", "sufficient_decrease", "boundary_margin", "boundary_fraction"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{prefix}.{name}", "must be > 0")
        if self.max_iterations < 1:
            raise ConfigError(f"{prefix}.max_iterations", "must be >= 1")
        if not self.shrink < 1:
            raise ConfigError(f"{prefix}.shrink", "must be < 1")
        if not self.boundary_fraction < 1:
            raise ConfigError(f"{prefix}.boundary_fraction", "must be < 1")
        if any(not e > 0 for e in self.epsilon_schedule):
            raise ConfigError(f"{prefix}.epsilon_schedule", "entries must be > 0")


@dataclass(frozen=True, eq=False)
class SmoothedSolution:
    z: np.ndarray
    x: np.ndarray
    temperature: float
    epsilon: float
    grad_norm: float
    iterations: int
    tolerance: float
    objective_history: tuple[float, ...] = ()

    @property
    def converged(self) -> bool:
        return self.grad_norm <= self.tolerance


def temperature(graph: FlowGraph, epsilon: float) -> float:
    return graph.m / epsilon


def barrier_terms(graph: FlowGraph, x: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Barrier value, gradient and Hessian diagonal at a strictly interior x."""
    x = np.asarray(x, dtype=float)
    if x.shape != (graph.m,):
        raise SolverError(f"x has shape {x.shape}, graph needs ({graph.m},)")
    if not np.all((x > 0.0) & (x < 1.0)):
        raise SolverError("barrier evaluated outside the open unit box")
    upper = 1.0 - x
    value = -float(np.log(upper).sum() + np.log(x).sum())
    grad = 1.0 / upper - 1.0 / x
    hess = 1.0 / upper**2 + 1.0 / x**2
    return value, grad, hess


def _objective(t: float, costs: np.ndarray, x: np.ndarray) -> float:
    if not np.all((x > 0.0) & (x < 1.0)):
        return np.inf
    return float(t * (costs @ x) - np.log(x).sum() - np.log1p(-x).sum())


def reduced_hessian(graph: FlowGraph, hess_diag: np.ndarray) -> np.ndarray:
    B = graph.B
    return (B.T * hess_diag) @ B


def factorize(H: np.ndarray):
    try:
        return scipy.linalg.cho_factor(H, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"reduced barrier Hessian is not positive definite: {exc}") from exc


def _max_step(x: np.ndarray, dx: np.ndarray, fraction: float, margin: float) -> float:
    """Fraction-to-boundary step: each coordinate keeps at least (1 - fraction)
    of its distance to 0 and to 1, and never comes closer than ``margin``."""
    alpha = 1.0
    down = dx < 0
    if np.any(down):
        room = x[down]
        alpha = min(alpha, float(np.min(np.minimum(fraction * room, room - margin) / -dx[down])))
    up = dx > 0
    if np.any(up):
        room = 1.0 - x[up]
        alpha = min(alpha, float(np.min(np.minimum(fraction * room, room - margin) / dx[up])))
    return max(alpha, 0.0)


def _newton(
    graph: FlowGraph,
    costs: np.ndarray,
    t: float,
    z: np.ndarray,
    x: np.ndarray,
    options: NewtonOptions,
) -> tuple[np.ndarray, np.ndarray, float, int, list[float]]:
    B = graph.B
    f = _objective(t, costs, x)
    history = [f]
    linear = t * costs

    for iteration in range(options.max_iterations + 1):
        _, grad_p, hess_p = barrier_terms(graph, x)
        g = B.T @ (linear + grad_p)
        grad_norm = float(np.linalg.norm(g))
        if grad_norm <= options.tolerance:
            return z, x, grad_norm, iteration, history
        if iteration == options.max_iterations:
            break

        factor = factorize(reduced_hessian(graph, hess_p))
        dz = -scipy.linalg.cho_solve(factor, g, check_finite=False)
        dx = B @ dz
        decrement = float(-(g @ dz))

        alpha = _max_step(x, dx, options.boundary_fraction, options.boundary_margin)
        accepted = False
        for _ in range(_MAX_BACKTRACKS):
            f_new = _objective(t, costs, x + alpha * dx)
            if f_new <= f - options.sufficient_decrease * alpha * decrement:
                accepted = True
                break
            alpha *= options.shrink
        if not accepted:
            alpha = _max_step(x, dx, options.boundary_fraction, options.boundary_margin)
            f_new = _objective(t, costs, x + alpha * dx)
            if decrement > _FLAT_DECREMENT * max(1.0, abs(f)) or not np.isfinite(f_new):
                raise ConvergenceError("line search failed", grad_norm, iteration)

        z = z + alpha * dz
        # Updated in place rather than recomputed as x0 + B z: coordinates
        # close to 0 keep their relative precision that way.
        x = x + alpha * dx
        f = _objective(t, costs, x)
        if not np.isfinite(f):
            raise ConvergenceError("Newton step left the open unit box", grad_norm, iteration)
        history.append(f)

    raise ConvergenceError("Newton iterations exhausted", grad_norm, options.max_iterations)


def solve_smoothed(
    graph: FlowGraph,
    costs: np.ndarray,
    options: NewtonOptions | None = None,
) -> SmoothedSolution:
    options = options or NewtonOptions()
    options.validate()
    costs = np.asarray(costs, dtype=float)
    if costs.shape != (graph.m,):
        raise SolverError(f"cost vector has shape {costs.shape}, graph needs ({graph.m},)")
    if not np.all(np.isfinite(costs)):
        raise SolverError("cost vector contains non-finite entries")

    z = np.zeros(graph.B.shape[1])
    x = np.array(graph.x0, dtype=float)
    total_iterations = 0
    history: list[float] = []
    for eps in (*options.epsilon_schedule, options.epsilon):
        t = temperature(graph, eps)
        z, x, grad_norm, iterations, stage_history = _newton(graph, costs, t, z, x, options)
        total_iterations += iterations
        history = stage_history

    return SmoothedSolution(
        z=z,
        x=x,
        temperature=t,
        epsilon=options.epsilon,
        grad_norm=grad_norm,
        iterations=total_iterations,
        tolerance=options.tolerance,
        objective_history=tuple(history),
    )
