"""flowtrack command line.

Usage:
    python -m flowtrack.cli synth     --config configs/default.json
    python -m flowtrack.cli track     --config configs/default.json --cost handcrafted_B
    python -m flowtrack.cli eval      --config configs/default.json
    python -m flowtrack.cli train     --config configs/learning_vs_handcrafted.json
    python -m flowtrack.cli tune      --config configs/default.json --cost handcrafted_A
    python -m flowtrack.cli gradcheck --seed 7

Any config field can be overridden with ``--dotted.key=value`` (the value is
parsed as JSON, falling back to a plain string), e.g. ``--train.iterations=50``
or ``--window.mode=batch``. ``--threads`` sizes the worker pool.

Everything is written under ``paths.output_dir`` (default $FLOWTRACK_OUTPUT_DIR,
else ./out):

    synth      det/<seq>.txt, gt/<seq>.txt, synth.json
    track      results/<seq>.txt, timing.log, track.json
    eval       eval.json, eval.txt, eval.csv
    train      model.npz, model.json, loss.csv, train.log, train.json
    tune       tuned.json
    gradcheck  gradcheck.json (exit status 1 when any check fails)

In the default middle window mode the first and last W/2 frames of each
sequence are not emitted; use --window.mode=latest or batch to keep them.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

if __name__ == "__main__" and __package__ is None:
    sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from dotenv import load_dotenv

from flowtrack.common import ConfigError, FlowTrackError, append_line, log, read_bytes, schema, warn, write_bytes, write_json, write_text
from flowtrack.config import RunConfig, load_config
from flowtrack.cost_models import (
    GEOMETRY_AUX_DIM,
    HANDCRAFTED,
    geometric_aux,
    handcrafted_params,
    init_params,
    load_params,
    params_summary,
    save_params,
)
from flowtrack.detections_io import (
    DetectionSet,
    TrajectorySet,
    generate_benchmark,
    parse_detections,
    parse_groundtruth,
    write_detections,
    write_results,
)
from flowtrack.gradcheck import run_gradcheck
from flowtrack.metrics import evaluate, format_table, merge_reports, to_csv
from flowtrack.tracking import WindowTiming, track_sequence
from flowtrack.training import DEFAULT_GRIDS, train, tune_handcrafted

COMMANDS = ("synth", "track", "train", "eval", "gradcheck", "tune")
EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


# --------------------------------------------------------------------------- #
# Inputs
# --------------------------------------------------------------------------- #
def _sequence_files(path: str | None, field: str) -> dict[str, str]:
    """sequence id -> file; ``path`` is one file or a directory of .txt files."""
    if not path:
        raise ConfigError(field, "required by this command")
    if os.path.isdir(path):
        files = sorted(f for f in os.listdir(path) if f.endswith(".txt"))
        if not files:
            raise ConfigError(field, f"{path} contains no .txt files")
        return {f[:-4]: os.path.join(path, f) for f in files}
    if not os.path.isfile(path):
        raise ConfigError(field, f"{path} not found")
    return {Path(path).stem: path}


def _paired(first: str | None, first_field: str, second: str | None, second_field: str) -> list[tuple[str, str, str]]:
    left = _sequence_files(first, first_field)
    right = _sequence_files(second, second_field)
    if len(left) == 1 and len(right) == 1:
        (name, a), (_, b) = next(iter(left.items())), next(iter(right.items()))
        return [(name, a, b)]
    missing = sorted(set(left) - set(right))
    if missing:
        raise ConfigError(second_field, f"no file for sequences {missing}")
    return [(name, left[name], right[name]) for name in sorted(left)]


def _load_annotated(config: RunConfig) -> list[tuple[DetectionSet, TrajectorySet]]:
    fmt = config.formats
    out = []
    for name, det_path, gt_path in _paired(
        config.paths.detections, "paths.detections", config.paths.groundtruth, "paths.groundtruth"
    ):
        gt = parse_groundtruth(fmt.groundtruth, read_bytes(gt_path), sequence_id=name, classes=fmt.classes)
        probe = parse_detections(fmt.detections, read_bytes(det_path), sequence_id=name, classes=fmt.classes)
        last_gt = max((f for t in gt.trajectories for f in t.frames), default=-1)
        frame_count = max(probe.frame_count, last_gt + 1)
        dets = DetectionSet(name, probe.detections, frame_count)
        out.append((dets, gt))
    return out


def _load_detections(config: RunConfig) -> list[DetectionSet]:
    fmt = config.formats
    return [
        parse_detections(fmt.detections, read_bytes(path), sequence_id=name, classes=fmt.classes)
        for name, path in _sequence_files(config.paths.detections, "paths.detections").items()
    ]


def _model(config: RunConfig):
    cost = config.cost
    if cost.architecture in HANDCRAFTED:
        return handcrafted_params(cost.architecture, cost.handcrafted)
    if not config.paths.model:
        raise ConfigError("paths.model", f"a trained parameter file is required for {cost.architecture}")
    if not os.path.isfile(config.paths.model):
        raise ConfigError("paths.model", f"{config.paths.model} not found")
    params = load_params(config.paths.model)
    if params.architecture != cost.architecture:
        warn("cli", f"{config.paths.model} holds a {params.architecture} model, not {cost.architecture}; using the file")
    return params


def _aux_fn(config: RunConfig):
    return geometric_aux if config.cost.aux == "geometry" else None


def _out(config: RunConfig, *parts: str) -> str:
    return os.path.join(config.paths.output_dir, *parts)


# --------------------------------------------------------------------------- #
# Commands
# --------------------------------------------------------------------------- #
def cmd_synth(config: RunConfig, executor) -> int:
    root = config.paths.output_dir
    fmt = config.formats
    sequences = generate_benchmark(config.synth, config.seed, config.sequences)
    manifest = []
    for dets, gt in sequences:
        write_bytes(_out(config, "det", f"{dets.sequence_id}.txt"), write_detections(fmt.detections, dets, object_type=fmt.object_type), root=root)
        write_bytes(_out(config, "gt", f"{dets.sequence_id}.txt"), write_results(fmt.groundtruth, gt, object_type=fmt.object_type), root=root)
        manifest.append({"sequence": dets.sequence_id, "detections": len(dets), "targets": len(gt), "boxes": gt.box_count()})
        log("synth", f"{dets.sequence_id}: {len(dets)} detections, {len(gt)} targets, {gt.box_count()} boxes")
    write_json(
        _out(config, "synth.json"),
        schema("synth", {"seed": config.seed, "config": dataclasses.asdict(config.synth), "sequences": manifest}),
        root=root,
    )
    return EXIT_OK


def cmd_track(config: RunConfig, executor) -> int:
    root = config.paths.output_dir
    model = _model(config)
    timing_path = _out(config, "timing.log")
    write_text(timing_path, "sequence,window,start,stop,detections,variables,seconds\n", root=root)
    summary = []
    for dets in _load_detections(config):
        def on_window(t: WindowTiming, name: str = dets.sequence_id) -> None:
            append_line(timing_path, f"{name},{t.index},{t.start},{t.stop},{t.detections},{t.variables},{t.seconds:.6f}", root=root)

        result = track_sequence(
            dets, model, config.window, config.graph,
            aux_fn=_aux_fn(config), executor=executor, on_window=on_window,
        )
        write_bytes(
            _out(config, "results", f"{dets.sequence_id}.txt"),
            write_results(config.formats.results, result, object_type=config.formats.object_type),
            root=root,
        )
        summary.append({"sequence": dets.sequence_id, "detections": len(dets), "trajectories": len(result), "boxes": result.box_count()})
        log("track", f"{dets.sequence_id}: {len(dets)} detections -> {len(result)} trajectories ({result.box_count()} boxes)")
    write_json(
        _out(config, "track.json"),
        schema("track", {"model": params_summary(model), "window": dataclasses.asdict(config.window), "sequences": summary}),
        root=root,
    )
    return EXIT_OK


def cmd_eval(config: RunConfig, executor) -> int:
    root = config.paths.output_dir
    predictions = config.paths.predictions or _out(config, "results")
    fmt = config.formats
    named = []
    for name, pred_path, gt_path in _paired(predictions, "paths.predictions", config.paths.groundtruth, "paths.groundtruth"):
        pred = parse_groundtruth(fmt.results, read_bytes(pred_path), sequence_id=name, classes=fmt.classes, drop_ignored=False)
        gt = parse_groundtruth(fmt.groundtruth, read_bytes(gt_path), sequence_id=name, classes=fmt.classes)
        named.append((name, evaluate(pred, gt, config.eval.iou_threshold)))
    overall = merge_reports(r for _, r in named)
    table = format_table([*named, ("overall", overall)] if len(named) > 1 else named)
    print(table, end="")
    write_text(_out(config, "eval.txt"), table, root=root)
    write_text(_out(config, "eval.csv"), to_csv(overall), root=root)
    write_json(
        _out(config, "eval.json"),
        schema("eval", {
            "iou_threshold": config.eval.iou_threshold,
            "sequences": {name: r.as_dict() for name, r in named},
            "overall": overall.as_dict(),
        }),
        root=root,
    )
    return EXIT_OK


def cmd_train(config: RunConfig, executor) -> int:
    root = config.paths.output_dir
    cost = config.cost
    if cost.architecture in HANDCRAFTED:
        raise ConfigError("cost.architecture", f"{cost.architecture} has nothing to train; use the tune command")
    sequences = _load_annotated(config)
    aux_dim = GEOMETRY_AUX_DIM if cost.aux == "geometry" else 0
    model = init_params(cost.architecture, feature_set=cost.feature_set, aux_dim=aux_dim, seed=config.seed)
    newton = dataclasses.replace(config.newton, epsilon=config.train.epsilon)
    train_config = dataclasses.replace(config.train, seed=config.seed)

    log_path = _out(config, "train.log")
    write_text(log_path, "", root=root)
    params, history = train(
        sequences, train_config, model,
        weights=config.loss, graph_config=config.graph, newton=newton,
        aux_fn=_aux_fn(config), executor=executor, log_path=log_path, log_root=root,
    )
    save_params(_out(config, "model.npz"), params, root=root)
    write_text(_out(config, "loss.csv"), history.to_csv(), root=root)
    validation = history.validation
    write_json(
        _out(config, "train.json"),
        schema("train", {
            "model": params_summary(params),
            "iterations": len(history.rows),
            "skipped_windows": history.skipped_windows,
            "total_windows": history.total_windows,
            "initial_val_loss": validation[0][1] if validation else None,
            "final_val_loss": validation[-1][1] if validation else None,
            "loss": dataclasses.asdict(config.loss),
        }),
        root=root,
    )
    return EXIT_OK


def cmd_tune(config: RunConfig, executor) -> int:
    architecture = config.cost.architecture
    if architecture not in HANDCRAFTED:
        raise ConfigError("cost.architecture", "tune grid-searches handcrafted_A or handcrafted_B only")
    grid = config.cost.grid or DEFAULT_GRIDS[architecture]
    best, results = tune_handcrafted(
        _load_annotated(config), architecture, grid,
        window=config.window, graph_config=config.graph,
        iou_threshold=config.eval.iou_threshold, executor=executor,
    )
    write_json(
        _out(config, "tuned.json"),
        schema("tune", {
            "architecture": architecture,
            "best": params_summary(best)["scalars"],
            "results": [{"values": dict(r.values), "mota": r.mota, "recall": r.recall} for r in results],
        }),
        root=config.paths.output_dir,
    )
    return EXIT_OK


def cmd_gradcheck(config: RunConfig, executor) -> int:
    report = run_gradcheck(config.seed, config.gradcheck, executor=executor)
    write_json(
        _out(config, "gradcheck.json"),
        schema("gradcheck", report.as_dict(), timestamp=False),
        root=config.paths.output_dir,
    )
    log("gradcheck", "all checks passed" if report.passed else "FAILED")
    return EXIT_OK if report.passed else EXIT_FAILED


HANDLERS = {
    "synth": cmd_synth,
    "track": cmd_track,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "tune": cmd_tune,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="flowtrack",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", default=None, help="JSON run config (default: built-in defaults).")
    ap.add_argument("--threads", type=int, default=None, help="Worker pool size (default: $FLOWTRACK_THREADS or 1).")
    ap.add_argument("--seed", type=int, default=None, help="Overrides the config's seed.")
    ap.add_argument("--cost", default=None, help="Overrides cost.architecture, e.g. handcrafted_B.")
    return ap


def main(argv: list[str] | None = None) -> int:
    load_dotenv()
    ap = build_parser()
    args, extra = ap.parse_known_args(argv)
    bad = [item for item in extra if not (item.startswith("--") and "=" in item)]
    if bad:
        ap.error(f"unrecognized arguments: {' '.join(bad)}")

    overrides = list(extra)
    if args.seed is not None:
        overrides.append(f"--seed={args.seed}")
    if args.threads is not None:
        overrides.append(f"--threads={args.threads}")
    if args.cost is not None:
        overrides.append(f"--cost.architecture={args.cost}")

    try:
        config = load_config(args.config, overrides)
        executor = ThreadPoolExecutor(max_workers=config.threads) if config.threads > 1 else None
        try:
            return HANDLERS[args.command](config, executor)
        finally:
            if executor is not None:
                executor.shutdown()
    except ConfigError as exc:
        print(f"[cli] config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FlowTrackError as exc:
        print(f"[cli] {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
