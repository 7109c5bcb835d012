import itertools
import sys
import unittest
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from flowtrack.common import ConfigError, SolverError
from flowtrack.cost_models import edge_features, handcrafted_params, model_forward
from flowtrack.detections_io import BoundingBox, Detection, DetectionSet, SynthConfig, Trajectory, TrajectorySet, generate_synthetic
from flowtrack.flow_graph import build_graph
from flowtrack.mcf_solver import extract_trajectories, solve_min_cost_flow
from flowtrack.tracking import IdCounter, WindowConfig, associate_windows, hungarian, track_sequence, window_starts

MODEL = handcrafted_params("handcrafted_B")
NOISELESS = SynthConfig(
    frame_count=20, initial_objects=1, birth_rate=0.0, death_probability=0.0, velocity_range=(1.0, 3.0),
    jitter=0.0, miss_rate=0.0, false_positive_rate=0.0, confidence_noise=0.0,
)


def det(frame: int, left: float = 0.0) -> Detection:
    return Detection(frame, BoundingBox(left, 0.0, 10.0, 20.0), 0.8)


def partition(result: TrajectorySet) -> set[frozenset]:
    return {frozenset(t.detections) for t in result.trajectories}


class HungarianTests(unittest.TestCase):
    def test_small_cases(self):
        one = hungarian(np.array([[7.0]]))
        self.assertEqual((one.pairs, one.cost), (((0, 0),), 7.0))
        two = hungarian(np.array([[1.0, 2.0], [2.0, 1.0]]))
        self.assertEqual((two.pairs, two.cost), (((0, 0), (1, 1)), 2.0))

    def test_matches_brute_force(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            cost = rng.uniform(0, 10, size=(5, 5))
            best = min(sum(cost[r, c] for r, c in enumerate(perm)) for perm in itertools.permutations(range(5)))
            self.assertAlmostEqual(hungarian(cost).cost, best)

    def test_rectangular_and_empty(self):
        result = hungarian(np.array([[5.0, 1.0, 3.0]]))
        self.assertEqual(result.mapping, {0: 1})
        self.assertEqual(hungarian(np.zeros((0, 3))).pairs, ())

    def test_non_finite_rejected(self):
        with self.assertRaises(SolverError):
            hungarian(np.array([[np.inf, 1.0]]))


class AssociateWindowsTests(unittest.TestCase):
    def setUp(self):
        self.dets = [det(f, 40.0 * k) for f in range(4) for k in range(3)]

    def track(self, tid, *indices):
        return Trajectory(tid, tuple(sorted((self.dets[i] for i in indices), key=lambda d: d.frame)))

    def test_identical_sets_keep_ids(self):
        prev = TrajectorySet("s", (self.track(10, 0, 3), self.track(11, 1, 4)))
        current = TrajectorySet("s", (self.track(0, 0, 3), self.track(1, 1, 4)))
        counter = IdCounter(100)
        self.assertEqual(associate_windows(prev, current, counter), {0: 10, 1: 11})
        self.assertEqual(counter.next(), 100)

    def test_disjoint_sets_get_fresh_ids(self):
        prev = TrajectorySet("s", (self.track(10, 0, 3),))
        current = TrajectorySet("s", (self.track(0, 1, 4), self.track(1, 2, 5)))
        self.assertEqual(associate_windows(prev, current, IdCounter(100)), {0: 100, 1: 101})

    def test_more_shared_detections_wins(self):
        # Current shares 3 detections with A and 1 with B.
        a = self.track(10, 0, 3, 6, 9)
        b = self.track(11, 1, 4)
        current = self.track(0, 3, 6, 9, 1)
        self.assertEqual(current.frames, (0, 1, 2, 3))
        mapping = associate_windows(TrajectorySet("s", (a, b)), TrajectorySet("s", (current,)), IdCounter(50))
        self.assertEqual(mapping, {0: 10})


class WindowLayoutTests(unittest.TestCase):
    def test_final_window_is_appended(self):
        self.assertEqual(window_starts(12, WindowConfig(length=5, stride=3)), [0, 3, 6, 7])
        self.assertEqual(window_starts(11, WindowConfig(length=5, stride=3)), [0, 3, 6])

    def test_stride_must_leave_overlap(self):
        with self.assertRaises(ConfigError):
            WindowConfig(length=5, stride=5).validate()
        with self.assertRaises(ConfigError):
            WindowConfig(mode="offline").validate()
        WindowConfig(length=5, stride=5, mode="batch").validate()


class TrackSequenceTests(unittest.TestCase):
    def setUp(self):
        self.dets, self.gt = generate_synthetic(NOISELESS, 4)

    def test_batch_equals_direct_solve(self):
        pair = DetectionSet("toy", (det(0), det(1, 1.0)), 2)
        result = track_sequence(pair, MODEL, WindowConfig(mode="batch"))
        graph = build_graph(pair)
        costs, _ = model_forward(MODEL, edge_features(graph))
        direct = extract_trajectories(graph, solve_min_cost_flow(graph, costs), pair)
        self.assertEqual(result, direct)
        self.assertEqual(len(result), 1)

    def test_middle_mode_single_object(self):
        timings = []
        result = track_sequence(self.dets, MODEL, WindowConfig(length=10, stride=1), on_window=timings.append)
        self.assertEqual(len(result), 1)
        # Middle frames of windows starting at 0..10.
        self.assertEqual(result.trajectories[0].frames, tuple(range(5, 16)))
        self.assertEqual([t.index for t in timings], list(range(11)))

    def test_latest_mode_covers_every_frame(self):
        result = track_sequence(self.dets, MODEL, WindowConfig(length=10, stride=3, mode="latest"))
        self.assertEqual(len(result), 1)
        self.assertEqual(result.trajectories[0].frames, tuple(range(20)))

    def test_sliding_agrees_with_batch(self):
        dets, _ = generate_synthetic(SynthConfig(
            frame_count=30, initial_objects=3, birth_rate=0.0, velocity_range=(1.0, 2.0), jitter=0.0,
            miss_rate=0.0, false_positive_rate=0.0, confidence_noise=0.0,
        ), 9)
        batch = track_sequence(dets, MODEL, WindowConfig(mode="batch"))
        sliding = track_sequence(dets, MODEL, WindowConfig(length=10, stride=9, mode="latest"))
        self.assertEqual(partition(sliding), partition(batch))

    def test_middle_mode_agrees_with_batch_on_emitted_frames(self):
        dets, _ = generate_synthetic(SynthConfig(
            frame_count=30, initial_objects=3, birth_rate=0.0, velocity_range=(1.0, 2.0), jitter=0.0,
            miss_rate=0.0, false_positive_rate=0.0, confidence_noise=0.0,
        ), 9)
        batch = track_sequence(dets, MODEL, WindowConfig(mode="batch"))
        middle = track_sequence(dets, MODEL, WindowConfig(length=10, stride=1))
        emitted = {f for t in middle.trajectories for f in t.frames}
        self.assertEqual(emitted, set(range(5, 26)))
        clipped = {frozenset(d for d in t.detections if d.frame in emitted) for t in batch.trajectories}
        self.assertEqual(partition(middle), clipped - {frozenset()})

    def test_minimal_overlap_keeps_ids_unique(self):
        result = track_sequence(self.dets, MODEL, WindowConfig(length=4, stride=3, mode="latest"))
        self.assertEqual(len(set(result.ids)), len(result))
        for traj in result.trajectories:
            self.assertEqual(len(set(traj.frames)), len(traj))

    def test_thread_pool_gives_same_result(self):
        window = WindowConfig(length=6, stride=2, mode="latest")
        serial = track_sequence(self.dets, MODEL, window)
        with ThreadPoolExecutor(max_workers=3) as pool:
            threaded = track_sequence(self.dets, MODEL, window, executor=pool)
        self.assertEqual(serial, threaded)

    def test_long_window_falls_back_to_batch(self):
        result = track_sequence(self.dets, MODEL, WindowConfig(length=50, stride=1))
        self.assertEqual(result.trajectories[0].frames, tuple(range(20)))

    def test_empty_detections(self):
        empty = DetectionSet("e", (), 12)
        self.assertEqual(len(track_sequence(empty, MODEL, WindowConfig(length=5, stride=2))), 0)


if __name__ == "__main__":
    unittest.main()
