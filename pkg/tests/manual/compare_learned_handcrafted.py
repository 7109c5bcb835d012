#!/usr/bin/env python3
"""Long run: a trained mlp2 cost against grid-tuned handcrafted_B costs.

Both cost models see the same synthetic training sequences and are scored on
held-out sequences with the same window settings. Takes several minutes, so it
is kept out of the automated suite.

    python tests/manual/compare_learned_handcrafted.py [iterations] [threads]
"""

from __future__ import annotations

import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parents[2]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from flowtrack.cost_models import init_params
from flowtrack.detections_io import SynthConfig, generate_benchmark
from flowtrack.metrics import evaluate, format_table, merge_reports
from flowtrack.tracking import WindowConfig, track_sequence
from flowtrack.training import DEFAULT_GRIDS, TrainConfig, train, tune_handcrafted

SYNTH = SynthConfig(frame_count=80, initial_objects=4)
WINDOW = WindowConfig(length=10, stride=1, mode="latest")


def score(model, sequences, executor):
    reports = [evaluate(track_sequence(dets, model, WINDOW, executor=executor), gt) for dets, gt in sequences]
    return merge_reports(reports)


def main() -> int:
    iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
    threads = int(sys.argv[2]) if len(sys.argv) > 2 else 4
    train_set = generate_benchmark(SYNTH, 0, 8, prefix="train")
    test_set = generate_benchmark(SYNTH, 1, 4, prefix="test")

    with ThreadPoolExecutor(max_workers=threads) as pool:
        print(f"[manual] tuning handcrafted_B on {len(train_set)} sequences")
        tuned, _ = tune_handcrafted(train_set, "handcrafted_B", DEFAULT_GRIDS["handcrafted_B"], window=WINDOW, executor=pool)

        print(f"[manual] training mlp2 for {iterations} iterations")
        config = TrainConfig(iterations=iterations, learning_rate=1e-3, validation_interval=max(1, iterations // 10))
        learned, history = train(train_set, config, init_params("mlp2"), executor=pool)
        for iteration, loss in history.validation:
            print(f"  val loss @ {iteration}: {loss:.4f}")

        handcrafted_report = score(tuned, test_set, pool)
        learned_report = score(learned, test_set, pool)

    print(format_table([("handcrafted_B", handcrafted_report), ("mlp2", learned_report)]), end="")
    gap = learned_report.mota - handcrafted_report.mota
    print(f"[manual] MOTA difference (mlp2 - handcrafted_B): {gap:+.4f}")
    return 0 if gap >= -0.02 else 1


if __name__ == "__main__":
    sys.exit(main())
