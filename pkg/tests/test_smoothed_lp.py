import dataclasses
import sys
import unittest
from pathlib import Path

import numpy as np

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from flowtrack.bilevel_grad import central_difference, relative_error
from flowtrack.common import ConfigError, ConvergenceError, SolverError
from flowtrack.detections_io import BoundingBox, Detection
from flowtrack.flow_graph import FlowGraph, GraphConfig, build_graph
from flowtrack.gradcheck import random_graph
from flowtrack.mcf_solver import solve_min_cost_flow
from flowtrack.smoothed_lp import NewtonOptions, barrier_terms, reduced_hessian, solve_smoothed, temperature

NO_PRUNING = GraphConfig(max_frame_gap=2, pruning_radius=None)
# Large enough to force one variable to flip in any graph drawn here.
FORCE = 1e4
MIN_GAP = 0.05


def det(frame: int, left: float = 0.0) -> Detection:
    return Detection(frame, BoundingBox(left, 0.0, 10.0, 20.0), 0.9)


class BarrierTests(unittest.TestCase):
    def setUp(self):
        self.graph = build_graph((det(0),), NO_PRUNING)

    def test_center_and_quarter_point(self):
        _, grad, hess = barrier_terms(self.graph, np.array([0.5, 0.25, 0.5]))
        self.assertAlmostEqual(grad[0], 0.0)
        self.assertAlmostEqual(hess[0], 8.0)
        self.assertAlmostEqual(hess[1], 16.0 / 9.0 + 16.0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        graph = build_graph((det(0), det(1), det(1, 3.0), det(2)), NO_PRUNING)
        for _ in range(10):
            x = rng.uniform(0.1, 0.9, size=graph.m)
            _, grad, _ = barrier_terms(graph, x)
            numeric = np.zeros(graph.m)
            for k in range(graph.m):
                def value(step, k=k):
                    bumped = x.copy()
                    bumped[k] += step
                    return barrier_terms(graph, bumped)[0]

                numeric[k] = central_difference(value, 1e-3)
            self.assertLessEqual(float(np.max(relative_error(grad, numeric))), 1e-6)

    def test_outside_box_rejected(self):
        with self.assertRaises(SolverError):
            barrier_terms(self.graph, np.array([0.5, 1.0, 0.5]))

    def test_reduced_hessian_is_positive_definite(self):
        graph = build_graph((det(0), det(1), det(2)), NO_PRUNING)
        _, _, hess = barrier_terms(graph, graph.x0)
        H = reduced_hessian(graph, hess)
        np.testing.assert_allclose(H, H.T)
        self.assertGreater(float(np.min(np.linalg.eigvalsh(H))), 0.0)


class SolveSmoothedTests(unittest.TestCase):
    def test_zero_costs_stay_at_center(self):
        graph = build_graph((det(0),), NO_PRUNING)
        solution = solve_smoothed(graph, np.zeros(3))
        np.testing.assert_allclose(solution.x, [0.5, 0.5, 0.5], atol=1e-9)
        self.assertTrue(solution.converged)

    def test_small_epsilon_rounds_to_exact_solution(self):
        graph = build_graph((det(0), det(1, 1.0)), NO_PRUNING)
        costs = np.array([0.2, 0.2, -0.5, -0.5, 0.2, 0.2, 0.1])
        smoothed = solve_smoothed(graph, costs, NewtonOptions(epsilon=0.01))
        self.assertTrue(smoothed.converged)
        self.assertEqual(smoothed.temperature, temperature(graph, 0.01))
        exact = solve_min_cost_flow(graph, costs)
        np.testing.assert_array_equal((smoothed.x > 0.5).astype(int), exact.x)

    def test_solution_is_feasible_and_converged(self):
        rng = np.random.default_rng(5)
        graph = build_graph((det(0), det(0, 4.0), det(1), det(1, 4.0), det(2)), NO_PRUNING)
        for _ in range(10):
            solution = solve_smoothed(graph, rng.normal(size=graph.m), NewtonOptions(epsilon=0.1))
            self.assertTrue(solution.converged)
            self.assertTrue(np.all((solution.x > 0) & (solution.x < 1)))
            np.testing.assert_allclose(graph.C @ solution.x, 0.0, atol=1e-9)
            history = np.array(solution.objective_history)
            self.assertTrue(np.all(np.diff(history) <= 1e-9 * np.maximum(1.0, np.abs(history[:-1]))))

    def test_iteration_cap_raises_with_grad_norm(self):
        graph = build_graph((det(0), det(1), det(2)), NO_PRUNING)
        costs = np.linspace(-2.0, 2.0, graph.m)
        with self.assertRaises(ConvergenceError) as ctx:
            solve_smoothed(graph, costs, NewtonOptions(epsilon=0.01, max_iterations=1))
        self.assertGreater(ctx.exception.grad_norm, 0.0)
        self.assertEqual(ctx.exception.iterations, 1)

    def test_bad_options_and_costs(self):
        graph = build_graph((det(0),), NO_PRUNING)
        with self.assertRaises(ConfigError):
            solve_smoothed(graph, np.zeros(3), dataclasses.replace(NewtonOptions(), epsilon=0.0))
        for fraction in (0.0, 1.0):
            with self.assertRaises(ConfigError) as ctx:
                solve_smoothed(graph, np.zeros(3), NewtonOptions(boundary_fraction=fraction))
            self.assertEqual(ctx.exception.field, "newton.boundary_fraction")
        with self.assertRaises(SolverError):
            solve_smoothed(graph, np.array([0.0, np.inf, 0.0]))
        with self.assertRaises(SolverError):
            solve_smoothed(graph, np.zeros(4))


def second_best_gap(graph: FlowGraph, costs: np.ndarray, best: np.ndarray) -> float:
    """Cost distance from the optimum to the cheapest other integer flow."""
    gaps = []
    for k in range(graph.m):
        forced = costs.copy()
        forced[k] += FORCE if best[k] == 1 else -FORCE
        x = solve_min_cost_flow(graph, forced).x
        if x[k] != best[k]:
            gaps.append(float(costs @ x - costs @ best))
    return min(gaps, default=np.inf)


class ExactAgreementTests(unittest.TestCase):
    def test_thresholded_solution_matches_exact_on_random_graphs(self):
        rng = np.random.default_rng(2024)
        matches = 0
        for _ in range(100):
            graph = random_graph(rng, 8)
            while True:
                costs = rng.normal(0.0, 1.0, size=graph.m)
                exact = solve_min_cost_flow(graph, costs).x
                if second_best_gap(graph, costs, exact) >= MIN_GAP:
                    break
            solution = solve_smoothed(graph, costs, NewtonOptions(epsilon=0.01))
            self.assertTrue(solution.converged)
            self.assertLessEqual(solution.iterations, 100)
            self.assertTrue(np.all((solution.x > 0.0) & (solution.x < 1.0)))
            self.assertLessEqual(float(np.max(np.abs(graph.C @ solution.x))), 1e-8)
            matches += int(np.array_equal((solution.x > 0.5).astype(int), exact))
        self.assertGreaterEqual(matches, 99)

    def test_default_epsilon_converges_on_random_graphs(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            graph = random_graph(rng, 6)
            solution = solve_smoothed(graph, rng.normal(0.0, 1.0, size=graph.m), NewtonOptions(epsilon=0.1))
            self.assertTrue(solution.converged)
            self.assertTrue(np.all((solution.x > 0.0) & (solution.x < 1.0)))
            self.assertLessEqual(float(np.max(np.abs(graph.C @ solution.x))), 1e-8)


if __name__ == "__main__":
    unittest.main()
