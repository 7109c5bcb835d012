import sys
import unittest
from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from flowtrack.common import ConfigError
from flowtrack.detections_io import BoundingBox, Detection, TrajectorySet
from flowtrack.metrics import evaluate, format_table, merge_reports, to_csv


def boxes(frames, left: float = 0.0) -> list[Detection]:
    return [Detection(f, BoundingBox(left, 0.0, 10.0, 20.0), 1.0) for f in frames]


def tracks(groups: dict[int, list[Detection]]) -> TrajectorySet:
    return TrajectorySet.from_groups("seq", groups)


GT = tracks({1: boxes(range(5)), 2: boxes(range(5), 100.0)})


class PerfectAndEmptyTests(unittest.TestCase):
    def test_perfect_tracking(self):
        report = evaluate(GT, GT)
        self.assertEqual((report.mota, report.motp, report.recall, report.precision), (1.0, 1.0, 1.0, 1.0))
        self.assertEqual((report.ids, report.frag, report.mt, report.pt, report.ml), (0, 0, 2, 0, 0))
        self.assertEqual(report.flags, ())

    def test_empty_predictions(self):
        report = evaluate(TrajectorySet("seq"), GT)
        self.assertEqual(report.mota, 0.0)
        self.assertEqual(report.recall, 0.0)
        self.assertEqual(report.precision, 1.0)
        self.assertEqual(report.fn, 10)
        self.assertEqual(report.ml, 2)
        self.assertTrue(any("precision" in flag for flag in report.flags))

    def test_empty_groundtruth(self):
        report = evaluate(GT, TrajectorySet("seq"))
        self.assertEqual((report.mota, report.recall, report.fp), (1.0, 1.0, 10))
        self.assertTrue(any("gt_boxes=0" in flag for flag in report.flags))

    def test_threshold_range(self):
        for bad in (0.0, 1.0, 1.5):
            with self.assertRaises(ConfigError):
                evaluate(GT, GT, bad)


class TallyTests(unittest.TestCase):
    def mistakes(self) -> TrajectorySet:
        # One miss on track 1, one identity switch on track 2, one stray box.
        return tracks({
            10: boxes([0, 1, 3, 4]),
            20: boxes([0, 1], 100.0),
            21: boxes([2, 3, 4], 100.0),
            30: boxes([3], 500.0),
        })

    def test_one_of_each_error(self):
        report = evaluate(self.mistakes(), GT)
        self.assertEqual((report.tp, report.fp, report.fn, report.ids), (9, 1, 1, 1))
        self.assertAlmostEqual(report.mota, 0.7)
        self.assertAlmostEqual(report.mota, 1.0 - (report.fn + report.fp + report.ids) / report.gt_boxes)
        self.assertAlmostEqual(report.recall, 0.9)
        self.assertAlmostEqual(report.precision, 0.9)
        self.assertEqual(report.frag, 1)
        self.assertEqual(report.mt + report.pt + report.ml, report.gt_tracks)

    def test_ids_are_symbolic(self):
        pred = self.mistakes()
        relabeled = tracks({900 - t.target_id: list(t.detections) for t in pred.trajectories})
        self.assertEqual(evaluate(relabeled, GT).as_dict(), evaluate(pred, GT).as_dict())

    def test_extra_false_positive_never_helps(self):
        pred = self.mistakes()
        groups = {t.target_id: list(t.detections) for t in pred.trajectories}
        groups[99] = boxes([1], 800.0)
        self.assertLessEqual(evaluate(tracks(groups), GT).mota, evaluate(pred, GT).mota)

    def test_existing_match_is_kept(self):
        gt = tracks({1: boxes([0, 1])})
        # Frame 1: id 5 still overlaps (IoU 0.6), id 6 overlaps perfectly.
        shifted = Detection(1, BoundingBox(2.5, 0.0, 10.0, 20.0), 1.0)
        pred = tracks({5: boxes([0]) + [shifted], 6: boxes([1])})
        report = evaluate(pred, gt)
        self.assertEqual((report.ids, report.tp, report.fp), (0, 2, 1))

    def test_partially_tracked(self):
        report = evaluate(tracks({7: boxes([0, 1])}), tracks({1: boxes(range(4))}))
        self.assertEqual((report.mt, report.pt, report.ml), (0, 1, 0))


class ReportOutputTests(unittest.TestCase):
    def test_merge_pools_tallies(self):
        a = evaluate(GT, GT)
        b = evaluate(TrajectorySet("seq"), GT)
        merged = merge_reports([a, b])
        self.assertEqual((merged.tp, merged.fn, merged.gt_boxes), (10, 10, 20))
        self.assertAlmostEqual(merged.mota, 0.5)
        self.assertEqual(merged.gt_tracks, 4)

    def test_table_and_csv(self):
        report = evaluate(TrajectorySet("seq"), GT)
        table = format_table([("seq", report)])
        self.assertTrue(table.splitlines()[0].startswith("metric"))
        self.assertIn("MOTA", table)
        self.assertIn("note (seq):", table)
        csv = to_csv(report).splitlines()
        self.assertEqual(csv[0], "metric,value")
        self.assertIn("mota,0.0", csv)
        self.assertTrue(any(line.startswith("flag,") for line in csv))


if __name__ == "__main__":
    unittest.main()
