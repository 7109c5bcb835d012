import sys
import unittest
from pathlib import Path

import numpy as np

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from flowtrack.bilevel_grad import central_difference, finite_difference_costs, grad_costs, relative_error
from flowtrack.common import SolverError
from flowtrack.gradcheck import random_graph
from flowtrack.smoothed_lp import NewtonOptions, solve_smoothed

TIGHT = NewtonOptions(epsilon=0.1, tolerance=1e-10)


class GradCostsTests(unittest.TestCase):
    def test_zero_upstream_gradient(self):
        graph = random_graph(np.random.default_rng(0), 5)
        solution = solve_smoothed(graph, np.zeros(graph.m))
        np.testing.assert_array_equal(grad_costs(graph, solution, np.zeros(graph.m)).dl_dc, np.zeros(graph.m))

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(42)
        for _ in range(5):
            graph = random_graph(rng, 6)
            costs = rng.normal(size=graph.m)
            target = rng.uniform(size=graph.m)

            def loss(x):
                return float(np.sum((x - target) ** 2))

            solution = solve_smoothed(graph, costs, TIGHT)
            analytic = grad_costs(graph, solution, 2.0 * (solution.x - target)).dl_dc
            numeric = finite_difference_costs(graph, costs, loss, TIGHT, delta=1e-4)
            self.assertLessEqual(float(np.max(relative_error(analytic, numeric))), 1e-4)

    def test_raising_a_cost_lowers_its_flow(self):
        rng = np.random.default_rng(3)
        graph = random_graph(rng, 6)
        solution = solve_smoothed(graph, rng.normal(size=graph.m), TIGHT)
        result = grad_costs(graph, solution, np.zeros(graph.m))
        for k in range(graph.m):
            unit = np.zeros(graph.m)
            unit[k] = 1.0
            self.assertLess(result.pullback(unit)[k], 0.0)

    def test_pullback_reuses_the_factor(self):
        rng = np.random.default_rng(9)
        graph = random_graph(rng, 6)
        solution = solve_smoothed(graph, rng.normal(size=graph.m), TIGHT)
        first, second = rng.normal(size=graph.m), rng.normal(size=graph.m)
        result = grad_costs(graph, solution, first)
        np.testing.assert_allclose(result.pullback(second), grad_costs(graph, solution, second).dl_dc)
        # The backward map is linear in dL/dx.
        np.testing.assert_allclose(result.pullback(first + second), result.dl_dc + result.pullback(second), atol=1e-9)

    def test_backward_map_is_symmetric_and_negative_semidefinite(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            graph = random_graph(rng, 6)
            solution = solve_smoothed(graph, rng.normal(size=graph.m), TIGHT)
            result = grad_costs(graph, solution, np.zeros(graph.m))
            jacobian = np.column_stack([result.pullback(e) for e in np.eye(graph.m)])
            scale = float(np.max(np.abs(jacobian)))
            np.testing.assert_allclose(jacobian, jacobian.T, atol=1e-9 * scale)
            self.assertLessEqual(float(np.max(np.linalg.eigvalsh(0.5 * (jacobian + jacobian.T)))), 1e-9 * scale)
            u, v = rng.normal(size=graph.m), rng.normal(size=graph.m)
            self.assertAlmostEqual(float(u @ result.pullback(v)), float(v @ result.pullback(u)), delta=1e-9 * scale * graph.m)
            self.assertLessEqual(float(u @ result.pullback(u)), 0.0)

    def test_unconverged_solution_rejected(self):
        graph = random_graph(np.random.default_rng(1), 4)
        solution = solve_smoothed(graph, np.zeros(graph.m))
        loose = type(solution)(
            z=solution.z, x=solution.x, temperature=solution.temperature, epsilon=solution.epsilon,
            grad_norm=1.0, iterations=solution.iterations, tolerance=1e-8,
        )
        with self.assertRaises(SolverError):
            grad_costs(graph, loose, np.zeros(graph.m))


class DifferenceHelperTests(unittest.TestCase):
    def test_richardson_is_exact_for_quartics(self):
        self.assertAlmostEqual(central_difference(lambda h: (1.0 + h) ** 4, 0.1), 4.0, places=10)

    def test_relative_error_floor(self):
        # Tiny components are compared against the vector's scale.
        err = relative_error(np.array([10.0, 1e-9]), np.array([10.0, 2e-9]))
        self.assertLess(err[1], 1e-5)
        self.assertEqual(err[0], 0.0)

    def test_relative_error_floor_is_tunable(self):
        analytic, numeric = np.array([1.0, 0.0]), np.array([1.0, 1e-3])
        self.assertAlmostEqual(float(relative_error(analytic, numeric)[1]), 1.0)
        self.assertAlmostEqual(float(relative_error(analytic, numeric, floor=1e-2)[1]), 0.1)


if __name__ == "__main__":
    unittest.main()
