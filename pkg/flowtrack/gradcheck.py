"""Finite-difference suites for the differentiable pipeline.

Each suite runs over small random graphs and reports its worst error
against a tolerance. Random inputs come from one root seed, so a run is a
pure function of (seed, config).
"""

from __future__ import annotations

from concurrent.futures import Executor
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from flowtrack.bilevel_grad import central_difference, grad_costs, relative_error
from flowtrack.common import ConfigError, SolverError, log
from flowtrack.cost_models import LEARNED, edge_features, init_params, model_backward, model_forward
from flowtrack.detections_io import BoundingBox, Detection
from flowtrack.flow_graph import FlowGraph, GraphConfig, build_graph
from flowtrack.smoothed_lp import NewtonOptions, barrier_terms, solve_smoothed

AUX_DIM = 4
# Two step sizes disagreeing by more than this (relative) means a ReLU kink in range.
KINK_TOLERANCE = 1e-4


@dataclass(frozen=True)
class GradcheckConfig:
    graphs: int = 50
    max_detections: int = 6
    epsilon: float = 0.1
    delta: float = 1e-4
    newton_tolerance: float = 1e-10
    cost_tolerance: float = 1e-4
    model_tolerance: float = 1e-5
    chain_tolerance: float = 1e-3
    chain_graphs: int = 5
    chain_coordinates: int = 12
    # Relative errors divide by at least floor * (largest gradient magnitude, min 1).
    relative_floor: float = 1e-4
    chain_relative_floor: float = 1e-3

    def validate(self, prefix: str = "gradcheck") -> None:
        for name in ("graphs", "max_detections", "chain_graphs", "chain_coordinates"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{prefix}.{name}", "must be >= 1")
        for name in (
            "epsilon", "delta", "newton_tolerance", "cost_tolerance", "model_tolerance", "chain_tolerance",
            "relative_floor", "chain_relative_floor",
        ):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{prefix}.{name}", "must be > 0")


@dataclass(frozen=True)
class CheckResult:
    name: str
    cases: int
    max_error: float
    tolerance: float
    failures: int = 0
    # None for checks that compare absolute values.
    relative_floor: float | None = None

    @property
    def passed(self) -> bool:
        return self.failures == 0 and self.max_error <= self.tolerance


@dataclass(frozen=True)
class GradcheckReport:
    seed: int
    checks: tuple[CheckResult, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def as_dict(self) -> dict:
        return {
            "seed": self.seed,
            "passed": self.passed,
            "checks": [{**asdict(c), "passed": c.passed} for c in self.checks],
        }


def random_detections(rng: np.random.Generator, n: int, *, frames: int | None = None) -> tuple[Detection, ...]:
    """``n`` overlapping boxes on a few frames, so most pairs become links."""
    frames = frames or max(2, (n + 1) // 2 + 1)
    out = []
    for frame in sorted(rng.integers(0, frames, size=n).tolist()):
        box = BoundingBox(
            100.0 + rng.uniform(-10.0, 10.0),
            100.0 + rng.uniform(-10.0, 10.0),
            40.0 + rng.uniform(-5.0, 5.0),
            80.0 + rng.uniform(-10.0, 10.0),
        )
        out.append(Detection(int(frame), box, float(rng.uniform(0.1, 0.95))))
    return tuple(out)


def random_graph(rng: np.random.Generator, max_detections: int, *, max_frame_gap: int = 3) -> FlowGraph:
    n = int(rng.integers(1, max_detections + 1))
    return build_graph(random_detections(rng, n), GraphConfig(max_frame_gap=max_frame_gap, pruning_radius=None))


def _kink_free_difference(f: Callable[[float], float], delta: float) -> float | None:
    """Richardson difference, or None when the two step sizes disagree."""
    coarse = (f(delta) - f(-delta)) / (2.0 * delta)
    fine = (f(0.5 * delta) - f(-0.5 * delta)) / delta
    if abs(coarse - fine) > KINK_TOLERANCE * max(1.0, abs(fine)):
        return None
    return (4.0 * fine - coarse) / 3.0


def _squared_to(target: np.ndarray) -> Callable[[np.ndarray], float]:
    return lambda x: float(np.sum((x - target) ** 2))


def barrier_gradient_error(rng: np.random.Generator, config: GradcheckConfig) -> tuple[float, int]:
    graph = random_graph(rng, config.max_detections)
    x = rng.uniform(0.2, 0.8, size=graph.m)
    _, grad, _ = barrier_terms(graph, x)
    numeric = np.zeros(graph.m)
    for k in range(graph.m):
        def value(step: float, k: int = k) -> float:
            bumped = x.copy()
            bumped[k] += step
            return barrier_terms(graph, bumped)[0]

        numeric[k] = central_difference(value, 1e-3)
    return float(np.max(relative_error(grad, numeric, floor=config.relative_floor))), 0


def certificate_error(rng: np.random.Generator, config: GradcheckConfig) -> tuple[float, int]:
    graph = random_graph(rng, config.max_detections)
    costs = rng.normal(0.0, 1.0, size=graph.m)
    try:
        solution = solve_smoothed(graph, costs, NewtonOptions(epsilon=config.epsilon))
    except SolverError as exc:
        log("gradcheck", f"certificates: solver failed on a graph with M={graph.m}: {exc}")
        return np.inf, 1
    interior = bool(np.all((solution.x > 0.0) & (solution.x < 1.0)))
    residual = float(np.max(np.abs(graph.C @ solution.x)))
    return residual, 0 if interior and solution.converged else 1


def cost_gradient_error(rng: np.random.Generator, config: GradcheckConfig) -> tuple[float, int]:
    graph = random_graph(rng, config.max_detections)
    costs = rng.normal(0.0, 1.0, size=graph.m)
    target = rng.uniform(0.0, 1.0, size=graph.m)
    options = NewtonOptions(epsilon=config.epsilon, tolerance=config.newton_tolerance)
    loss = _squared_to(target)
    try:
        solution = solve_smoothed(graph, costs, options)
        analytic = grad_costs(graph, solution, 2.0 * (solution.x - target)).dl_dc
        numeric = np.zeros(graph.m)
        for k in range(graph.m):
            def bumped_loss(step: float, k: int = k) -> float:
                bumped = costs.copy()
                bumped[k] += step
                return loss(solve_smoothed(graph, bumped, options).x)

            numeric[k] = central_difference(bumped_loss, config.delta)
    except SolverError as exc:
        log("gradcheck", f"costs: solver failed on a graph with M={graph.m}: {exc}")
        return np.inf, 1
    return float(np.max(relative_error(analytic, numeric, floor=config.relative_floor))), 0


def model_gradient_error(architecture: str, rng: np.random.Generator, config: GradcheckConfig) -> tuple[float, int]:
    """Worst parameter-gradient error of one architecture under L(c) = w.c + |c|^2 / 2."""
    graph = random_graph(rng, config.max_detections)
    features = edge_features(graph)
    aux = rng.normal(0.0, 1.0, size=(features.l, AUX_DIM)) if architecture == "twostream" else None
    params = init_params(architecture, aux_dim=AUX_DIM if aux is not None else 0, seed=int(rng.integers(2**31)))
    weights = rng.normal(0.0, 1.0, size=graph.m)

    def loss_of(p) -> float:
        c, _ = model_forward(p, features, aux)
        return float(weights @ c + 0.5 * c @ c)

    costs, cache = model_forward(params, features, aux)
    grads = model_backward(params, cache, weights + costs)
    analytic = np.concatenate([grads[name].ravel() for name in params.names])
    base = params.to_vector()
    kept, numeric = [], []
    for k in range(base.size):
        def bumped(step: float, k: int = k) -> float:
            vector = base.copy()
            vector[k] += step
            return loss_of(params.from_vector(vector))

        value = _kink_free_difference(bumped, 1e-5)
        if value is not None:
            kept.append(k)
            numeric.append(value)
    return float(np.max(relative_error(analytic[kept], np.array(numeric), floor=config.relative_floor), initial=0.0)), 0


def chain_gradient_error(rng: np.random.Generator, config: GradcheckConfig) -> tuple[float, int]:
    """dL/dTheta for mlp2 through the whole forward pipeline, on sampled coordinates."""
    graph = random_graph(rng, config.max_detections)
    features = edge_features(graph)
    params = init_params("mlp2", seed=int(rng.integers(2**31)))
    target = rng.uniform(0.0, 1.0, size=graph.m)
    options = NewtonOptions(epsilon=config.epsilon, tolerance=config.newton_tolerance)
    loss = _squared_to(target)

    def pipeline(p) -> float:
        c, _ = model_forward(p, features)
        return loss(solve_smoothed(graph, c, options).x)

    try:
        costs, cache = model_forward(params, features)
        solution = solve_smoothed(graph, costs, options)
        dl_dc = grad_costs(graph, solution, 2.0 * (solution.x - target)).dl_dc
        grads = model_backward(params, cache, dl_dc)
        analytic = np.concatenate([grads[name].ravel() for name in params.names])
        base = params.to_vector()
        picks = rng.choice(base.size, size=min(config.chain_coordinates, base.size), replace=False)
        kept, numeric = [], []
        for k in picks.tolist():
            def bumped(step: float, k: int = k) -> float:
                vector = base.copy()
                vector[k] += step
                return pipeline(params.from_vector(vector))

            value = _kink_free_difference(bumped, 1e-5)
            if value is not None:
                kept.append(k)
                numeric.append(value)
    except SolverError as exc:
        log("gradcheck", f"chain_mlp2: solver failed on a graph with M={graph.m}: {exc}")
        return np.inf, 1
    return float(np.max(relative_error(analytic[kept], np.array(numeric), floor=config.chain_relative_floor), initial=0.0)), 0


def _run_suite(
    name: str,
    case: Callable[[np.random.Generator, GradcheckConfig], tuple[float, int]],
    seeds: list[np.random.SeedSequence],
    tolerance: float,
    floor: float | None,
    config: GradcheckConfig,
    executor: Executor | None,
) -> CheckResult:
    def one(seed: np.random.SeedSequence) -> tuple[float, int]:
        return case(np.random.default_rng(seed), config)

    outcomes = list(executor.map(one, seeds)) if executor is not None else [one(s) for s in seeds]
    worst = max((e for e, _ in outcomes), default=0.0)
    failures = sum(f for _, f in outcomes)
    result = CheckResult(name, len(seeds), worst, tolerance, failures, floor)
    status = "ok" if result.passed else "FAIL"
    measure = "absolute" if floor is None else f"relative floor={floor:.0e}"
    log("gradcheck", f"{name}: {status} max_error={worst:.3e} tol={tolerance:.0e} ({measure}) "
                     f"cases={len(seeds)} failures={failures}")
    return result


def _model_suite(architecture: str):
    return lambda rng, config: model_gradient_error(architecture, rng, config)


def run_gradcheck(seed: int, config: GradcheckConfig | None = None, *, executor: Executor | None = None) -> GradcheckReport:
    config = config or GradcheckConfig()
    config.validate()
    floor, chain_floor = config.relative_floor, config.chain_relative_floor
    suites: list[tuple[str, Callable, int, float, float | None]] = [
        ("smoothed_lp.barrier_gradient", barrier_gradient_error, config.graphs, 1e-6, floor),
        ("smoothed_lp.certificates", certificate_error, config.graphs, 1e-8, None),
        ("bilevel_grad.costs", cost_gradient_error, config.graphs, config.cost_tolerance, floor),
        *[(f"cost_models.{arch}", _model_suite(arch), config.chain_graphs, config.model_tolerance, floor)
          for arch in LEARNED],
        ("bilevel_grad.chain_mlp2", chain_gradient_error, config.chain_graphs, config.chain_tolerance, chain_floor),
    ]
    roots = np.random.SeedSequence(seed).spawn(len(suites))
    checks = tuple(
        _run_suite(name, case, root.spawn(count), tolerance, rel_floor, config, executor)
        for (name, case, count, tolerance, rel_floor), root in zip(suites, roots)
    )
    return GradcheckReport(seed, checks)
