"""Learning cost parameters from annotated sequences.

Ground truth for a graph comes from matching detections to annotated boxes
(IoU > 0.5, highest confidence first) and then activating, frame by frame,
the link from each true positive to the temporally closest true positive of
the same identity. Every link gets one of five labels:

    FPFP         both ends false positives
    TPFP         exactly one end is a true positive
    TPTPplus     same identity, active in the ground-truth flow
    TPTPplusFar  same identity, inactive (a longer link than the active one)
    TPTPminus    two true positives of different identities

The loss multiplies per-variable weights: omega_amb on FPFP and TPTPplusFar
links, omega_pr on every variable touching a true positive, omega_link on
every link.
"""

from __future__ import annotations

import itertools
import math
from collections import deque
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from flowtrack.bilevel_grad import grad_costs
from flowtrack.common import ConfigError, SolverError, TrainingError, append_line, log, warn, warn_once
from flowtrack.cost_models import (
    CostModelParams,
    edge_features,
    handcrafted_params,
    model_backward,
    model_forward,
)
from flowtrack.detections_io import DetectionSet, TrajectorySet
from flowtrack.flow_graph import FlowGraph, GraphConfig, build_graph, iou
from flowtrack.smoothed_lp import NewtonOptions, solve_smoothed

TP, FP = "TP", "FP"
FPFP, TPFP, TPTP_PLUS, TPTP_PLUS_FAR, TPTP_MINUS = "FPFP", "TPFP", "TPTPplus", "TPTPplusFar", "TPTPminus"
LINK_LABELS = (FPFP, TPFP, TPTP_PLUS, TPTP_PLUS_FAR, TPTP_MINUS)
LOSS_KINDS = ("squared", "l1")

MATCH_IOU = 0.5
# Abort when more than this share of windows failed over the trailing window of iterations.
SKIP_ABORT_FRACTION = 0.10
SKIP_ABORT_SPAN = 100

AuxFn = Callable[[FlowGraph], np.ndarray]


# --------------------------------------------------------------------------- #
# Ground truth
# --------------------------------------------------------------------------- #
@dataclass(frozen=True, eq=False)
class GtFlow:
    x: np.ndarray  # (M,) in {0, 1}
    identities: np.ndarray  # (N,) matched target id, -1 for false positives
    link_labels: tuple[str, ...]

    @property
    def unary_labels(self) -> tuple[str, ...]:
        return tuple(TP if tid >= 0 else FP for tid in self.identities)

    @property
    def true_positive(self) -> np.ndarray:
        return self.identities >= 0

    def variable_weights(self, weights: "LossWeights") -> np.ndarray:
        tp = self.true_positive
        unary = np.where(tp, weights.omega_pr, 1.0)
        link = np.ones(len(self.link_labels))
        for k, label in enumerate(self.link_labels):
            if label in (FPFP, TPTP_PLUS_FAR):
                link[k] *= weights.omega_amb
            if label != FPFP:
                link[k] *= weights.omega_pr
        link *= weights.omega_link
        return np.concatenate([unary, unary, unary, link])


def _match_frame(graph: FlowGraph, det_indices: list[int], gt_boxes: list[tuple[int, object]]) -> dict[int, int]:
    candidates = []
    for g, (tid, gt_det) in enumerate(gt_boxes):
        for i in det_indices:
            overlap = iou(graph.detections[i].box, gt_det.box)
            if overlap > MATCH_IOU:
                candidates.append((-graph.detections[i].confidence, i, -overlap, g, tid))
    candidates.sort()
    claimed_gt: set[int] = set()
    matched: dict[int, int] = {}
    for _, i, _, g, tid in candidates:
        if i in matched or g in claimed_gt:
            continue
        matched[i] = tid
        claimed_gt.add(g)
    return matched


def generate_gt_flow(graph: FlowGraph, detections: DetectionSet, gt: TrajectorySet) -> GtFlow:
    if tuple(detections.detections) != graph.detections:
        raise TrainingError(f"{detections.sequence_id}: detections do not match the graph's frames")
    last_gt = max((f for t in gt.trajectories for f in t.frames), default=-1)
    if last_gt >= detections.frame_count:
        raise ValueError(
            f"{detections.sequence_id}: ground truth reaches frame {last_gt}, "
            f"detections cover frames 0-{detections.frame_count - 1}"
        )
    n = graph.n
    identities = np.full(n, -1, dtype=np.int64)

    by_frame: dict[int, list[int]] = {}
    for i, det in enumerate(graph.detections):
        by_frame.setdefault(det.frame, []).append(i)
    gt_frames = gt.by_frame()
    for frame, indices in by_frame.items():
        for i, tid in _match_frame(graph, indices, gt_frames.get(frame, [])).items():
            identities[i] = tid

    x = np.zeros(graph.m, dtype=np.int64)
    has_in = np.zeros(n, dtype=bool)
    has_out = np.zeros(n, dtype=bool)
    active_links: set[int] = set()
    # Detections are frame-sorted, so index order is frame order.
    for i in range(n):
        if identities[i] < 0:
            continue
        x[graph.det_index(i)] = 1
        options = sorted(
            (graph.link_gaps[k], graph.links[k][1], k)
            for k in graph.out_links[i]
            if identities[graph.links[k][1]] == identities[i] and not has_in[graph.links[k][1]]
        )
        if options:
            _, j, k = options[0]
            active_links.add(k)
            has_in[j] = True
            has_out[i] = True
    for i in np.flatnonzero(identities >= 0):
        if not has_in[i]:
            x[graph.in_index(i)] = 1
        if not has_out[i]:
            x[graph.out_index(i)] = 1
    for k in active_links:
        x[graph.link_index(k)] = 1

    labels = []
    for k, (i, j) in enumerate(graph.links):
        a, b = identities[i], identities[j]
        if a < 0 and b < 0:
            labels.append(FPFP)
        elif a < 0 or b < 0:
            labels.append(TPFP)
        elif a != b:
            labels.append(TPTP_MINUS)
        else:
            labels.append(TPTP_PLUS if k in active_links else TPTP_PLUS_FAR)

    if np.any(graph.C @ x != 0):  # pragma: no cover - guaranteed by the path construction
        raise TrainingError("ground-truth flow violates conservation")
    x.flags.writeable = False
    identities.flags.writeable = False
    return GtFlow(x, identities, tuple(labels))


# --------------------------------------------------------------------------- #
# Loss
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class LossWeights:
    omega_amb: float = 1.0
    omega_pr: float = 1.0
    omega_link: float = 1.0
    kind: str = "squared"

    def validate(self, prefix: str = "loss") -> None:
        if not 0.0 < self.omega_amb <= 1.0:
            raise ConfigError(f"{prefix}.omega_amb", "must be in (0, 1]")
        for name in ("omega_pr", "omega_link"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{prefix}.{name}", "must be > 0")
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"{prefix}.kind", f"must be one of {LOSS_KINDS}")


def weighted_loss(x_star: np.ndarray, gt: GtFlow, weights: LossWeights) -> tuple[float, np.ndarray]:
    x_star = np.asarray(x_star, dtype=float)
    if x_star.shape != gt.x.shape:
        raise TrainingError(f"solution has shape {x_star.shape}, ground truth has {gt.x.shape}")
    w = gt.variable_weights(weights)
    diff = x_star - gt.x
    if weights.kind == "squared":
        return float(w @ diff**2), 2.0 * w * diff
    return float(w @ np.abs(diff)), w * np.sign(diff)


# --------------------------------------------------------------------------- #
# ADAM
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True, eq=False)
class AdamState:
    m: Mapping[str, np.ndarray] = field(default_factory=dict)
    v: Mapping[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: CostModelParams,
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    hyper: AdamHyper,
    step: int,
) -> tuple[CostModelParams, AdamState]:
    """One bias-corrected ADAM update; ``step`` counts from 1."""
    if step < 1:
        raise TrainingError(f"ADAM step index counts from 1, got {step}")
    if set(grads) != set(params.names):
        raise TrainingError(f"gradient keys {sorted(grads)} do not match parameters {sorted(params.names)}")
    new_params, new_m, new_v = {}, {}, {}
    for name in params.names:
        p, g = params[name], np.asarray(grads[name], dtype=float)
        if g.shape != p.shape:
            raise TrainingError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = hyper.beta1 * state.m.get(name, np.zeros_like(p)) + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * state.v.get(name, np.zeros_like(p)) + (1.0 - hyper.beta2) * g * g
        m_hat = m / (1.0 - hyper.beta1**step)
        v_hat = v / (1.0 - hyper.beta2**step)
        new_params[name] = p - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
        new_m[name], new_v[name] = m, v
    return params.replace(new_params), AdamState(new_m, new_v)


# --------------------------------------------------------------------------- #
# Training loop
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    learning_rate: float = 1e-4
    decay_factor: float = 0.1
    decay_every: int = 20000
    window_length: int = 10
    batch_size: int = 8
    seed: int = 0
    epsilon: float = 0.1
    validation_fraction: float = 0.25
    validation_interval: int = 100
    log_every: int = 10

    def validate(self, prefix: str = "train") -> None:
        for name in ("iterations", "decay_every", "window_length", "batch_size", "validation_interval", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{prefix}.{name}", "must be >= 1")
        for name in ("learning_rate", "epsilon"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{prefix}.{name}", "must be > 0")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ConfigError(f"{prefix}.decay_factor", "must be in (0, 1]")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError(f"{prefix}.validation_fraction", "must be in [0, 1)")

    def learning_rate_at(self, iteration: int) -> float:
        return self.learning_rate * self.decay_factor ** (iteration // self.decay_every)


@dataclass(frozen=True)
class HistoryRow:
    iteration: int
    train_loss: float
    val_loss: float | None
    learning_rate: float
    skipped: int


@dataclass
class TrainHistory:
    rows: list[HistoryRow] = field(default_factory=list)
    skipped_windows: int = 0
    total_windows: int = 0

    @property
    def validation(self) -> list[tuple[int, float]]:
        return [(r.iteration, r.val_loss) for r in self.rows if r.val_loss is not None]

    def to_csv(self) -> str:
        lines = ["iter,train_loss,val_loss"]
        for r in self.rows:
            val = "" if r.val_loss is None else f"{r.val_loss:.8g}"
            lines.append(f"{r.iteration},{r.train_loss:.8g},{val}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True, eq=False)
class _Example:
    graph: FlowGraph
    gt: GtFlow
    aux: np.ndarray | None


@dataclass(frozen=True)
class _Window:
    sequence: int
    start: int
    stop: int


def split_windows(
    sequences: Sequence[tuple[DetectionSet, TrajectorySet]],
    config: TrainConfig,
) -> tuple[list[_Window], list[_Window]]:
    """Training windows (every start) and non-overlapping validation windows.

    The last ``validation_fraction`` of each sequence is held out; no window
    straddles the split.
    """
    w = config.window_length
    train_windows: list[_Window] = []
    val_windows: list[_Window] = []
    for s, (dets, _) in enumerate(sequences):
        frames = dets.frame_count
        split = frames - int(round(frames * config.validation_fraction))
        occupied = {d.frame for d in dets.detections}

        def has_detections(start: int, stop: int) -> bool:
            return any(f in occupied for f in range(start, stop))

        train_windows += [_Window(s, a, a + w) for a in range(0, split - w + 1) if has_detections(a, a + w)]
        val_windows += [_Window(s, a, a + w) for a in range(split, frames - w + 1, w) if has_detections(a, a + w)]
    return train_windows, val_windows


def _example(
    sequences: Sequence[tuple[DetectionSet, TrajectorySet]],
    window: _Window,
    graph_config: GraphConfig,
    aux_fn: AuxFn | None,
) -> _Example:
    dets, gt = sequences[window.sequence]
    clipped = dets.window(window.start, window.stop)
    graph = build_graph(clipped, graph_config)
    return _Example(graph, generate_gt_flow(graph, clipped, gt), aux_fn(graph) if aux_fn else None)


def window_loss(
    params: CostModelParams,
    example: _Example,
    weights: LossWeights,
    options: NewtonOptions,
    *,
    with_grad: bool = True,
) -> tuple[float, dict[str, np.ndarray] | None]:
    """Forward pipeline on one window and, optionally, the parameter gradient."""
    costs, cache = model_forward(params, edge_features(example.graph), example.aux)
    solution = solve_smoothed(example.graph, costs, options)
    loss, dl_dx = weighted_loss(solution.x, example.gt, weights)
    if not with_grad:
        return loss, None
    dl_dc = grad_costs(example.graph, solution, dl_dx).dl_dc
    return loss, model_backward(params, cache, dl_dc)


def _map(executor: Executor | None, fn, items):
    return list(executor.map(fn, items)) if executor is not None else [fn(item) for item in items]


def validation_loss(
    params: CostModelParams,
    examples: Sequence[_Example],
    weights: LossWeights,
    options: NewtonOptions,
    executor: Executor | None = None,
) -> float | None:
    def one(example: _Example) -> float | None:
        try:
            return window_loss(params, example, weights, options, with_grad=False)[0]
        except SolverError as exc:
            warn("train", f"validation window skipped: {exc}")
            return None

    losses = [v for v in _map(executor, one, examples) if v is not None]
    return float(np.mean(losses)) if losses else None


def train(
    sequences: Sequence[tuple[DetectionSet, TrajectorySet]],
    config: TrainConfig,
    model: CostModelParams,
    *,
    weights: LossWeights | None = None,
    graph_config: GraphConfig | None = None,
    newton: NewtonOptions | None = None,
    aux_fn: AuxFn | None = None,
    executor: Executor | None = None,
    log_path: str | None = None,
    log_root: str | None = None,
) -> tuple[CostModelParams, TrainHistory]:
    config.validate()
    weights = weights or LossWeights()
    weights.validate()
    graph_config = graph_config or GraphConfig()
    options = NewtonOptions(epsilon=config.epsilon) if newton is None else newton
    if not sequences:
        raise TrainingError("training needs at least one annotated sequence")
    if not model.trainable:
        raise TrainingError(f"{model.architecture} costs have no trainable parameters; use tune instead")

    train_windows, val_windows = split_windows(sequences, config)
    if not train_windows:
        raise TrainingError(
            f"no training window of {config.window_length} frames fits before the validation split"
        )
    if not val_windows:
        warn_once("train:no-val", "train", "no validation window fits; validation loss will be empty")
    val_examples = [_example(sequences, w, graph_config, aux_fn) for w in val_windows]
    log("train", f"{len(train_windows)} training windows, {len(val_windows)} validation windows, "
                 f"{model.architecture}/{model.feature_set} with {model.parameter_count} parameters")

    def emit(line: str) -> None:
        log("train", line)
        if log_path:
            append_line(log_path, line, root=log_root)

    rng = np.random.default_rng(config.seed)
    params = model
    state = AdamState()
    history = TrainHistory()
    recent: deque[tuple[int, int]] = deque(maxlen=SKIP_ABORT_SPAN)

    def step_window(window: _Window):
        try:
            example = _example(sequences, window, graph_config, aux_fn)
            return window_loss(params, example, weights, options)
        except SolverError as exc:
            return exc

    for iteration in range(1, config.iterations + 1):
        picks = rng.integers(0, len(train_windows), size=config.batch_size)
        batch = [train_windows[int(p)] for p in picks]
        results = _map(executor, step_window, batch)

        losses: list[float] = []
        total: dict[str, np.ndarray] = {name: np.zeros_like(params[name]) for name in params.names}
        skipped = 0
        for window, result in zip(batch, results):
            if isinstance(result, SolverError):
                skipped += 1
                warn("train", f"iter {iteration} skipped window {window.sequence}:{window.start}: {result}")
                continue
            loss, grads = result
            losses.append(loss)
            for name, g in grads.items():
                total[name] += g

        history.skipped_windows += skipped
        history.total_windows += len(batch)
        recent.append((len(batch), skipped))
        if len(recent) == SKIP_ABORT_SPAN:
            seen = sum(n for n, _ in recent)
            failed = sum(s for _, s in recent)
            if failed > SKIP_ABORT_FRACTION * seen:
                raise TrainingError(
                    f"{failed} of {seen} windows failed in the solver over the last {SKIP_ABORT_SPAN} iterations; "
                    f"try a larger train.epsilon or check the cost scale"
                )

        lr = config.learning_rate_at(iteration - 1)
        if losses:
            mean_grads = {name: g / len(losses) for name, g in total.items()}
            params, state = adam_step(params, mean_grads, state, AdamHyper(lr=lr), iteration)
        train_loss = float(np.mean(losses)) if losses else math.nan

        val_loss = None
        if val_examples and (iteration == 1 or iteration % config.validation_interval == 0 or iteration == config.iterations):
            val_loss = validation_loss(params, val_examples, weights, options, executor)
        history.rows.append(HistoryRow(iteration, train_loss, val_loss, lr, skipped))

        if iteration % config.log_every == 0 or iteration == 1 or val_loss is not None:
            val_text = f" val={val_loss:.4f}" if val_loss is not None else ""
            emit(f"iter {iteration} loss={train_loss:.4f}{val_text} lr={lr:.0e} skipped={skipped}")

    return params, history


# --------------------------------------------------------------------------- #
# Hand-crafted grid search
# --------------------------------------------------------------------------- #
DEFAULT_GRIDS = {
    "handcrafted_A": {"C": [0.1, 0.3, 0.5, 0.7], "B_rate": [0.1, 0.3, 0.5], "V_max": [10.0, 30.0, 60.0]},
    "handcrafted_B": {"C": [0.5, 1.0, 1.5], "alpha": [-4.0, -3.0, -2.0], "beta": [0.1, 0.5, 1.0]},
}


@dataclass(frozen=True)
class TuneResult:
    values: Mapping[str, float]
    mota: float
    recall: float


def tune_handcrafted(
    sequences: Sequence[tuple[DetectionSet, TrajectorySet]],
    architecture: str,
    grid: Mapping[str, Iterable[float]] | None = None,
    *,
    window=None,
    graph_config: GraphConfig | None = None,
    iou_threshold: float = 0.5,
    executor: Executor | None = None,
) -> tuple[CostModelParams, list[TuneResult]]:
    """Grid search for the hand-crafted costs: best pooled MOTA, recall breaks ties."""
    from flowtrack.metrics import evaluate, merge_reports
    from flowtrack.tracking import WindowConfig, track_sequence

    if not sequences:
        raise TrainingError("tuning needs at least one annotated sequence")
    grid = dict(grid or DEFAULT_GRIDS.get(architecture, {}))
    if not grid:
        raise TrainingError(f"no parameter grid for {architecture!r}")
    window = window or WindowConfig(mode="batch")
    names = sorted(grid)

    def score(values: tuple[float, ...]) -> TuneResult:
        setting = dict(zip(names, values))
        params = handcrafted_params(architecture, setting)
        reports = [evaluate(track_sequence(dets, params, window, graph_config), gt, iou_threshold) for dets, gt in sequences]
        pooled = merge_reports(reports)
        return TuneResult(setting, pooled.mota, pooled.recall)

    combos = list(itertools.product(*(list(grid[name]) for name in names)))
    results = _map(executor, score, combos)
    for result in results:
        log("tune", " ".join(f"{k}={v:g}" for k, v in result.values.items()) + f" mota={result.mota:.4f} recall={result.recall:.4f}")
    best = max(results, key=lambda r: (r.mota, r.recall))
    log("tune", "best " + " ".join(f"{k}={v:g}" for k, v in best.values.items()) + f" mota={best.mota:.4f}")
    return handcrafted_params(architecture, best.values), results
