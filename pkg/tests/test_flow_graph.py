import sys
import unittest
from pathlib import Path

import numpy as np
import scipy.linalg

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from flowtrack.common import ConfigError, GraphError
from flowtrack.detections_io import BoundingBox, Detection, DetectionSet
from flowtrack.flow_graph import GraphConfig, build_graph, conservation_matrix, interior_point, iou, null_space_basis

NO_PRUNING = GraphConfig(max_frame_gap=2, pruning_radius=None)


def det(frame: int, left: float = 0.0, top: float = 0.0, conf: float = 0.9) -> Detection:
    return Detection(frame, BoundingBox(left, top, 10.0, 20.0), conf)


class IouTests(unittest.TestCase):
    def test_reference_values(self):
        a = BoundingBox(0, 0, 2, 2)
        self.assertEqual(iou(a, a), 1.0)
        self.assertEqual(iou(a, BoundingBox(5, 5, 1, 1)), 0.0)
        self.assertAlmostEqual(iou(a, BoundingBox(1, 0, 2, 2)), 1.0 / 3.0)
        # Touching edges share no area.
        self.assertEqual(iou(a, BoundingBox(2, 0, 2, 2)), 0.0)


class BuildGraphTests(unittest.TestCase):
    def test_two_by_two_frames(self):
        dets = (det(0), det(0, 50), det(1), det(1, 50))
        graph = build_graph(dets, NO_PRUNING)
        self.assertEqual(len(graph.links), 4)
        self.assertEqual(graph.m, 16)
        self.assertEqual(graph.C.shape, (8, 16))
        self.assertEqual(graph.B.shape, (16, 8))

    def test_single_detection(self):
        graph = build_graph((det(0),), NO_PRUNING)
        self.assertEqual(graph.links, ())
        self.assertEqual(graph.m, 3)
        self.assertEqual(graph.B.shape, (3, 1))
        np.testing.assert_allclose(np.abs(graph.B[:, 0]), np.full(3, 1.0 / np.sqrt(3.0)))
        np.testing.assert_allclose(graph.x0, [0.5, 0.5, 0.5])

    def test_gap_bound_is_inclusive(self):
        dets = (det(0), det(1), det(2))
        self.assertEqual(build_graph(dets, GraphConfig(max_frame_gap=1, pruning_radius=None)).links, ((0, 1), (1, 2)))
        self.assertIn((0, 2), build_graph(dets, NO_PRUNING).links)

    def test_same_frame_never_linked(self):
        graph = build_graph((det(0), det(0, 1)), NO_PRUNING)
        self.assertEqual(graph.links, ())

    def test_pruning_radius_drops_far_pairs(self):
        dets = (det(0), det(1, 5.0), det(1, 500.0))
        graph = build_graph(dets, GraphConfig(max_frame_gap=2, pruning_radius=1.0))
        self.assertEqual(graph.links, ((0, 1),))

    def test_empty_detections_rejected(self):
        with self.assertRaises(GraphError):
            build_graph(DetectionSet("seq", (), 0))

    def test_invalid_config(self):
        with self.assertRaises(ConfigError):
            build_graph((det(0),), GraphConfig(max_frame_gap=0))

    def test_basis_spans_conservation_null_space(self):
        rng = np.random.default_rng(2)
        dets = tuple(det(int(f), float(rng.uniform(0, 5))) for f in sorted(rng.integers(0, 4, size=7)))
        graph = build_graph(dets, NO_PRUNING)
        np.testing.assert_allclose(graph.C @ graph.B, 0.0, atol=1e-12)
        np.testing.assert_allclose(graph.B.T @ graph.B, np.eye(graph.B.shape[1]), atol=1e-12)
        self.assertEqual(graph.B.shape[1], graph.m - 2 * graph.n)
        np.testing.assert_allclose(graph.C @ graph.x0, 0.0, atol=1e-12)
        self.assertTrue(np.all((graph.x0 > 0) & (graph.x0 < 1)))


class NullSpaceTests(unittest.TestCase):
    def test_single_detection_basis(self):
        C = np.array([[1.0, -1.0, 0.0], [0.0, -1.0, 1.0]])
        B = null_space_basis(C)
        self.assertEqual(B.shape, (3, 1))
        v = B[:, 0] * np.sign(B[0, 0])
        np.testing.assert_allclose(v, np.ones(3) / np.sqrt(3.0))

    def test_projector_does_not_depend_on_the_basis(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            dets = tuple(det(int(f), float(rng.uniform(0, 5))) for f in sorted(rng.integers(0, 4, size=6)))
            C = build_graph(dets, NO_PRUNING).C
            B = null_space_basis(C)
            projector = B @ B.T
            svd_basis = scipy.linalg.null_space(C)
            np.testing.assert_allclose(projector, svd_basis @ svd_basis.T, atol=1e-8)
            permuted = null_space_basis(C[rng.permutation(C.shape[0])])
            np.testing.assert_allclose(projector, permuted @ permuted.T, atol=1e-8)

    def test_rank_deficient_rejected(self):
        C = np.array([[1.0, -1.0, 0.0], [2.0, -2.0, 0.0]])
        with self.assertRaises(GraphError):
            null_space_basis(C)

    def test_conservation_rows(self):
        C = conservation_matrix(2, ((0, 1),))
        # Link 0 -> 1 leaves the out side of 0 and enters the in side of 1.
        self.assertEqual(C[2 + 0, 6], 1.0)
        self.assertEqual(C[1, 6], 1.0)
        self.assertEqual(int(np.count_nonzero(C[:, 6])), 2)


class InteriorPointTests(unittest.TestCase):
    def test_out_degree_two(self):
        dets = (det(0), det(1), det(1, 2.0))
        graph = build_graph(dets, NO_PRUNING)
        x0 = interior_point(graph, 0.01)
        self.assertAlmostEqual(x0[graph.out_index(0)], 0.48)
        self.assertAlmostEqual(x0[graph.in_index(0)], 0.5)
        self.assertAlmostEqual(x0[graph.in_index(1)], 0.49)

    def test_too_large_epsilon(self):
        graph = build_graph((det(0), det(1), det(1, 2.0)), NO_PRUNING)
        with self.assertRaises(GraphError):
            interior_point(graph, 0.3)


if __name__ == "__main__":
    unittest.main()
