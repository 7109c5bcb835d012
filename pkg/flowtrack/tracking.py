"""Sliding-window inference.

Each window of W frames is solved exactly, its trajectories are matched to
the previous window's by the number of detections they share, and only the
window's output frames are emitted:

    middle  frames [s + W/2, s + W/2 + stride), i.e. W/2 frames of look-ahead
    latest  the newest frames of the window (on-line operation)
    batch   the whole sequence as one graph

In middle mode the first and last W/2 frames of a sequence are never emitted.
"""

from __future__ import annotations

import itertools
import time
from concurrent.futures import Executor
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import linear_sum_assignment

from flowtrack.common import ConfigError, SolverError, warn
from flowtrack.cost_models import CostModelParams, edge_features, model_forward
from flowtrack.detections_io import Detection, DetectionSet, Trajectory, TrajectorySet
from flowtrack.flow_graph import FlowGraph, GraphConfig, build_graph
from flowtrack.mcf_solver import extract_trajectories, solve_min_cost_flow

MODES = ("middle", "latest", "batch")
# Cost for trajectory pairs that share no detection; above any real 1/(1 + shared).
FORBIDDEN = 1e6


@dataclass(frozen=True)
class WindowConfig:
    length: int = 10
    stride: int = 1
    mode: str = "middle"

    def validate(self, prefix: str = "window") -> None:
        if self.mode not in MODES:
            raise ConfigError(f"{prefix}.mode", f"must be one of {MODES}")
        if self.length < 1:
            raise ConfigError(f"{prefix}.length", "must be >= 1")
        if self.mode != "batch" and not 0 < self.stride < self.length:
            raise ConfigError(f"{prefix}.stride", f"must satisfy 0 < stride < length ({self.length})")


@dataclass(frozen=True)
class Assignment:
    pairs: tuple[tuple[int, int], ...]
    cost: float

    @property
    def mapping(self) -> dict[int, int]:
        return dict(self.pairs)


def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-cost assignment of min(R, C) row/column pairs, sorted by row."""
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise SolverError(f"assignment cost must be a matrix, got shape {cost.shape}")
    if cost.size == 0:
        return Assignment((), 0.0)
    if not np.all(np.isfinite(cost)):
        raise SolverError("assignment cost contains non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    pairs = tuple(sorted(zip(rows.tolist(), cols.tolist())))
    return Assignment(pairs, float(cost[rows, cols].sum()))


class IdCounter:
    """Monotone identity source; never hands out an id twice."""

    def __init__(self, start: int = 0) -> None:
        self._ids = itertools.count(start)

    def next(self) -> int:
        return next(self._ids)


def associate_windows(previous: TrajectorySet, current: TrajectorySet, counter: IdCounter) -> dict[int, int]:
    """Map each current trajectory id to an inherited or fresh global id."""
    prev_dets = [set(t.detections) for t in previous.trajectories]
    shared = np.array(
        [[len(set(cur.detections) & p) for p in prev_dets] for cur in current.trajectories],
        dtype=float,
    ).reshape(len(current), len(previous))
    cost = np.where(shared > 0, 1.0 / (1.0 + shared), FORBIDDEN)

    mapping: dict[int, int] = {}
    for r, c in hungarian(cost).pairs:
        if shared[r, c] > 0:
            mapping[current.trajectories[r].target_id] = previous.trajectories[c].target_id
    for traj in current.trajectories:
        if traj.target_id not in mapping:
            mapping[traj.target_id] = counter.next()
    return mapping


@dataclass(frozen=True)
class WindowTiming:
    index: int
    start: int
    stop: int
    detections: int
    variables: int
    seconds: float


AuxFn = Callable[[FlowGraph], np.ndarray]


def _solve_window(
    detections: DetectionSet,
    model: CostModelParams,
    graph_config: GraphConfig,
    aux_fn: AuxFn | None,
) -> tuple[TrajectorySet, int]:
    if not detections.detections:
        return TrajectorySet(detections.sequence_id), 0
    graph = build_graph(detections, graph_config)
    costs, _ = model_forward(model, edge_features(graph), aux_fn(graph) if aux_fn else None)
    solution = solve_min_cost_flow(graph, costs)
    return extract_trajectories(graph, solution, detections), graph.m


def window_starts(frame_count: int, window: WindowConfig) -> list[int]:
    starts = list(range(0, frame_count - window.length + 1, window.stride))
    if starts and starts[-1] + window.length < frame_count:
        starts.append(frame_count - window.length)
    return starts


def _emitted_frames(start: int, first: bool, window: WindowConfig) -> range:
    if window.mode == "middle":
        mid = start + window.length // 2
        return range(mid, mid + window.stride)
    return range(0 if first else start, start + window.length)


def track_sequence(
    detections: DetectionSet,
    model: CostModelParams,
    window: WindowConfig | None = None,
    graph_config: GraphConfig | None = None,
    *,
    aux_fn: AuxFn | None = None,
    executor: Executor | None = None,
    on_window: Callable[[WindowTiming], None] | None = None,
) -> TrajectorySet:
    window = window or WindowConfig()
    window.validate()
    graph_config = graph_config or GraphConfig()
    sequence_id = detections.sequence_id

    if window.mode != "batch" and window.length > detections.frame_count:
        warn(
            "track",
            f"{sequence_id}: window of {window.length} frames exceeds the {detections.frame_count}-frame "
            f"sequence, solving it as one batch",
        )
        window = WindowConfig(window.length, window.stride, "batch")

    if window.mode == "batch":
        started = time.perf_counter()
        result, m = _solve_window(detections, model, graph_config, aux_fn)
        if on_window:
            on_window(WindowTiming(0, 0, detections.frame_count, len(detections), m, time.perf_counter() - started))
        return result

    starts = window_starts(detections.frame_count, window)

    def solve(item: tuple[int, int]) -> tuple[TrajectorySet, WindowTiming]:
        index, start = item
        began = time.perf_counter()
        clipped = detections.window(start, start + window.length)
        local, m = _solve_window(clipped, model, graph_config, aux_fn)
        elapsed = time.perf_counter() - began
        return local, WindowTiming(index, start, start + window.length, len(clipped), m, elapsed)

    items = list(enumerate(starts))
    solved = executor.map(solve, items) if executor is not None else map(solve, items)

    counter = IdCounter()
    previous = TrajectorySet(sequence_id)
    emitted: set[int] = set()
    groups: dict[int, list[Detection]] = {}
    # Association threads the id state, so it runs in window order.
    for (index, start), (local, timing) in zip(items, solved):
        mapping = associate_windows(previous, local, counter)
        previous = TrajectorySet(
            sequence_id,
            tuple(Trajectory(mapping[t.target_id], t.detections) for t in local.trajectories),
        )
        frames = [
            f for f in _emitted_frames(start, index == 0, window)
            if f not in emitted and f < detections.frame_count
        ]
        emitted.update(frames)
        frame_set = set(frames)
        for traj in previous.trajectories:
            kept = [d for d in traj.detections if d.frame in frame_set]
            if kept:
                groups.setdefault(traj.target_id, []).extend(kept)
        if on_window:
            on_window(timing)

    return TrajectorySet.from_groups(sequence_id, groups)
