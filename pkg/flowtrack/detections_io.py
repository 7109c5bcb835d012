"""Detection and ground-truth files, plus synthetic annotated sequences.

Two on-disk formats are supported:

  mot    MOTChallenge CSV ``frame,id,bb_left,bb_top,bb_width,bb_height,conf,x,y,z``.
         Frames are 1-based on disk. In ground-truth files column 7 doubles as
         the consider flag: rows with 0 there are not evaluated and dropped,
         unless column 8 is -1 as in tracker output.
  kitti  KITTI tracking text ``frame trackid type truncated occluded alpha
         left top right bottom h w l x y z ry [score]``. Frames are 0-based.
         ``DontCare`` rows are dropped. Raw detector scores are squashed into
         [0, 1] with a unit-scale logistic; rows without a score get 1.0.

Internally every frame index is 0-based. Confidences outside [0, 1] are
clamped; every other invariant violation is a ParseError with a line number.

The synthetic generator moves boxes with constant velocity plus Gaussian
jitter, drops detections at the miss rate and scatters false positives
uniformly over the image. Output is a pure function of (config, seed).
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Collection, Iterable, Sequence

import numpy as np

from flowtrack.common import ConfigError, ParseError

FORMATS = ("mot", "kitti")

MOT_MIN_FIELDS = 7
MOT_MAX_FIELDS = 10
KITTI_GT_FIELDS = 17
KITTI_DET_FIELDS = 18

# Confidences this close to 0 or 1 are written to KITTI as finite logits.
_LOGIT_CLIP = 1e-6


@dataclass(frozen=True)
class BoundingBox:
    left: float
    top: float
    width: float
    height: float

    def __post_init__(self) -> None:
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"box width and height must be positive, got {self.width}x{self.height}")

    @property
    def right(self) -> float:
        return self.left + self.width

    @property
    def bottom(self) -> float:
        return self.top + self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.left + 0.5 * self.width, self.top + 0.5 * self.height)

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass(frozen=True)
class Detection:
    frame: int
    box: BoundingBox
    confidence: float

    def __post_init__(self) -> None:
        if self.frame < 0:
            raise ValueError(f"frame must be >= 0, got {self.frame}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")


@dataclass(frozen=True)
class DetectionSet:
    sequence_id: str
    detections: tuple[Detection, ...]
    frame_count: int
    image_width: float = 0.0
    image_height: float = 0.0

    def __post_init__(self) -> None:
        frames = [d.frame for d in self.detections]
        if any(a > b for a, b in zip(frames, frames[1:])):
            raise ValueError("detections must be sorted by frame")
        if frames and frames[-1] >= self.frame_count:
            raise ValueError(f"frame {frames[-1]} outside frame count {self.frame_count}")

    def __len__(self) -> int:
        return len(self.detections)

    def window(self, start: int, stop: int) -> "DetectionSet":
        """Detections with ``start <= frame < stop``; frame indices stay absolute."""
        kept = tuple(d for d in self.detections if start <= d.frame < stop)
        return DetectionSet(self.sequence_id, kept, self.frame_count, self.image_width, self.image_height)


@dataclass(frozen=True)
class Trajectory:
    target_id: int
    detections: tuple[Detection, ...]

    def __post_init__(self) -> None:
        frames = [d.frame for d in self.detections]
        if len(set(frames)) != len(frames):
            raise ValueError(f"trajectory {self.target_id} has two detections in one frame")
        if frames != sorted(frames):
            raise ValueError(f"trajectory {self.target_id} is not sorted by frame")

    def __len__(self) -> int:
        return len(self.detections)

    @property
    def frames(self) -> tuple[int, ...]:
        return tuple(d.frame for d in self.detections)

    def at_frame(self, frame: int) -> Detection | None:
        for det in self.detections:
            if det.frame == frame:
                return det
        return None


@dataclass(frozen=True)
class TrajectorySet:
    sequence_id: str
    trajectories: tuple[Trajectory, ...] = ()

    def __post_init__(self) -> None:
        ids = [t.target_id for t in self.trajectories]
        if len(set(ids)) != len(ids):
            raise ValueError("target ids must be unique within a trajectory set")

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(t.target_id for t in self.trajectories)

    def by_frame(self) -> dict[int, list[tuple[int, Detection]]]:
        """frame -> [(target id, detection), ...]"""
        out: dict[int, list[tuple[int, Detection]]] = defaultdict(list)
        for traj in self.trajectories:
            for det in traj.detections:
                out[det.frame].append((traj.target_id, det))
        return dict(out)

    def box_count(self) -> int:
        return sum(len(t) for t in self.trajectories)

    @classmethod
    def from_groups(cls, sequence_id: str, groups: dict[int, Iterable[Detection]]) -> "TrajectorySet":
        trajectories = tuple(
            Trajectory(tid, tuple(sorted(dets, key=lambda d: d.frame)))
            for tid, dets in sorted(groups.items())
            if dets
        )
        return cls(sequence_id, trajectories)


@dataclass(frozen=True)
class SynthConfig:
    frame_count: int = 50
    image_width: float = 1280.0
    image_height: float = 720.0
    initial_objects: int = 3
    birth_rate: float = 0.1
    death_probability: float = 0.01
    velocity_range: tuple[float, float] = (1.0, 6.0)
    box_height_range: tuple[float, float] = (60.0, 160.0)
    aspect_ratio: float = 0.45
    jitter: float = 1.5
    miss_rate: float = 0.2
    false_positive_rate: float = 0.5
    tp_confidence: float = 0.8
    fp_confidence: float = 0.4
    confidence_noise: float = 0.1

    def validate(self, prefix: str = "synth") -> None:
        checks = [
            ("frame_count", self.frame_count >= 1, "must be >= 1"),
            ("image_width", self.image_width > 0, "must be > 0"),
            ("image_height", self.image_height > 0, "must be > 0"),
            ("initial_objects", self.initial_objects >= 0, "must be >= 0"),
            ("birth_rate", self.birth_rate >= 0, "must be >= 0"),
            ("death_probability", 0 <= self.death_probability <= 1, "must be in [0, 1]"),
            ("velocity_range", 0 <= self.velocity_range[0] <= self.velocity_range[1], "needs 0 <= min <= max"),
            ("box_height_range", 0 < self.box_height_range[0] <= self.box_height_range[1], "needs 0 < min <= max"),
            ("aspect_ratio", self.aspect_ratio > 0, "must be > 0"),
            ("jitter", self.jitter >= 0, "must be >= 0"),
            ("miss_rate", 0 <= self.miss_rate < 1, "must be in [0, 1)"),
            ("false_positive_rate", self.false_positive_rate >= 0, "must be >= 0"),
            ("tp_confidence", 0 <= self.tp_confidence <= 1, "must be in [0, 1]"),
            ("fp_confidence", 0 <= self.fp_confidence <= 1, "must be in [0, 1]"),
            ("confidence_noise", self.confidence_noise >= 0, "must be >= 0"),
        ]
        for name, ok, message in checks:
            if not ok:
                raise ConfigError(f"{prefix}.{name}", message)


# --------------------------------------------------------------------------- #
# Parsing
# --------------------------------------------------------------------------- #
def _clamp01(value: float) -> float:
    return min(1.0, max(0.0, value))


def _squash(score: float) -> float:
    # Unit-scale logistic, guarded against overflow for very negative scores.
    if score >= 0:
        return 1.0 / (1.0 + math.exp(-score))
    e = math.exp(score)
    return e / (1.0 + e)


def _logit(p: float) -> float:
    p = min(1.0 - _LOGIT_CLIP, max(_LOGIT_CLIP, p))
    return math.log(p / (1.0 - p))


def _decode(text: bytes | str) -> str:
    if isinstance(text, bytes):
        return text.decode("utf-8-sig")
    return text


def _data_lines(text: bytes | str) -> Iterable[tuple[int, str]]:
    for lineno, raw in enumerate(_decode(text).splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        yield lineno, line


def _floats(fields: Sequence[str], lineno: int) -> list[float]:
    try:
        return [float(f) for f in fields]
    except ValueError:
        raise ParseError(f"non-numeric field in {list(fields)}", lineno) from None


def _integral(value: float, name: str, lineno: int) -> int:
    if not math.isfinite(value) or value != int(value):
        raise ParseError(f"{name} must be an integer, got {value}", lineno)
    return int(value)


def _box(left: float, top: float, width: float, height: float, lineno: int) -> BoundingBox:
    if not all(math.isfinite(v) for v in (left, top, width, height)):
        raise ParseError("box coordinates must be finite", lineno)
    if width <= 0 or height <= 0:
        raise ParseError(f"box width/height must be positive, got {width}x{height}", lineno)
    return BoundingBox(left, top, width, height)


@dataclass
class _Row:
    lineno: int
    frame: int
    target_id: int
    box: BoundingBox
    confidence: float
    ignored: bool = False
    object_type: str = ""


def _parse_mot_row(line: str, lineno: int, groundtruth: bool) -> _Row:
    fields = [f.strip() for f in line.split(",")]
    if not MOT_MIN_FIELDS <= len(fields) <= MOT_MAX_FIELDS:
        raise ParseError(f"expected {MOT_MIN_FIELDS}-{MOT_MAX_FIELDS} comma-separated fields, got {len(fields)}", lineno)
    values = _floats(fields, lineno)
    frame = _integral(values[0], "frame", lineno) - 1
    if frame < 0:
        raise ParseError(f"MOT frames are 1-based, got {frame + 1}", lineno)
    target_id = _integral(values[1], "id", lineno)
    box = _box(values[2], values[3], values[4], values[5], lineno)
    raw_conf = values[6]
    if not math.isfinite(raw_conf):
        raise ParseError("confidence must be finite", lineno)
    # Column 7 is a consider flag only on ground-truth rows; tracker output
    # marks its class column with -1 and keeps a confidence there.
    result_row = len(values) > 7 and values[7] == -1.0
    ignored = groundtruth and raw_conf == 0.0 and not result_row
    return _Row(lineno, frame, target_id, box, _clamp01(raw_conf), ignored)


def _parse_kitti_row(line: str, lineno: int) -> _Row:
    fields = line.split()
    if len(fields) not in (KITTI_GT_FIELDS, KITTI_DET_FIELDS):
        raise ParseError(f"expected {KITTI_GT_FIELDS} or {KITTI_DET_FIELDS} space-separated fields, got {len(fields)}", lineno)
    object_type = fields[2]
    numeric = _floats(fields[:2] + fields[3:], lineno)
    frame = _integral(numeric[0], "frame", lineno)
    if frame < 0:
        raise ParseError(f"frame must be >= 0, got {frame}", lineno)
    target_id = _integral(numeric[1], "trackid", lineno)
    # numeric[2:] maps to fields[3:]: truncated, occluded, alpha, left, top, right, bottom, ...
    left, top, right, bottom = numeric[5], numeric[6], numeric[7], numeric[8]
    box = _box(left, top, right - left, bottom - top, lineno)
    if len(fields) == KITTI_DET_FIELDS:
        score = numeric[-1]
        if math.isnan(score):
            raise ParseError("score must be a number", lineno)
        confidence = _squash(score)
    else:
        confidence = 1.0
    ignored = object_type == "DontCare"
    return _Row(lineno, frame, target_id, box, confidence, ignored, object_type)


def _parse_rows(
    fmt: str,
    text: bytes | str,
    groundtruth: bool,
    classes: Collection[str] | None,
) -> list[_Row]:
    if fmt not in FORMATS:
        raise ParseError(f"unknown format {fmt!r}, expected one of {FORMATS}")
    rows: list[_Row] = []
    for lineno, line in _data_lines(text):
        row = _parse_mot_row(line, lineno, groundtruth) if fmt == "mot" else _parse_kitti_row(line, lineno)
        if row.ignored:
            continue
        if fmt == "kitti" and classes is not None and row.object_type not in classes:
            continue
        rows.append(row)
    # Stable: frame order, then file order.
    rows.sort(key=lambda r: r.frame)
    return rows


def parse_detections(
    fmt: str,
    text: bytes | str,
    *,
    sequence_id: str = "",
    frame_count: int | None = None,
    image_size: tuple[float, float] = (0.0, 0.0),
    classes: Collection[str] | None = None,
) -> DetectionSet:
    rows = _parse_rows(fmt, text, groundtruth=False, classes=classes)
    detections = tuple(Detection(r.frame, r.box, r.confidence) for r in rows)
    last = rows[-1].frame + 1 if rows else 0
    if frame_count is None:
        frame_count = last
    elif frame_count < last:
        raise ParseError(f"frame {last - 1} exceeds declared frame count {frame_count}", rows[-1].lineno)
    return DetectionSet(sequence_id, detections, frame_count, float(image_size[0]), float(image_size[1]))


def parse_groundtruth(
    fmt: str,
    text: bytes | str,
    *,
    sequence_id: str = "",
    classes: Collection[str] | None = None,
    drop_ignored: bool = True,
) -> TrajectorySet:
    """Group rows by target id into trajectories.

    MOT rows with a zero consider flag are dropped unless their class column
    is -1, which is how tracker output (and ``write_results``) marks column 7
    as a confidence. ``drop_ignored=False`` turns the consider flag off entirely.
    """
    if fmt not in FORMATS:
        raise ParseError(f"unknown format {fmt!r}, expected one of {FORMATS}")
    rows: list[_Row] = []
    for lineno, line in _data_lines(text):
        row = _parse_mot_row(line, lineno, drop_ignored) if fmt == "mot" else _parse_kitti_row(line, lineno)
        if row.ignored:
            continue
        if fmt == "kitti" and classes is not None and row.object_type not in classes:
            continue
        rows.append(row)

    groups: dict[int, list[Detection]] = defaultdict(list)
    seen: dict[tuple[int, int], int] = {}
    for row in rows:
        if row.target_id < 0:
            raise ParseError(f"ground-truth id must be >= 0, got {row.target_id}", row.lineno)
        key = (row.target_id, row.frame)
        if key in seen:
            raise ParseError(
                f"duplicate (id={row.target_id}, frame={row.frame}) also on line {seen[key]}", row.lineno
            )
        seen[key] = row.lineno
        groups[row.target_id].append(Detection(row.frame, row.box, row.confidence))
    return TrajectorySet.from_groups(sequence_id, groups)


def _format_row(fmt: str, frame: int, tid: int, det: Detection, object_type: str) -> str:
    b = det.box
    if fmt == "mot":
        return (
            f"{frame + 1},{tid},{b.left:.6f},{b.top:.6f},{b.width:.6f},{b.height:.6f},"
            f"{det.confidence:.6f},-1,-1,-1"
        )
    line = (
        f"{frame} {tid} {object_type} 0 0 -10 "
        f"{b.left:.6f} {b.top:.6f} {b.right:.6f} {b.bottom:.6f} "
        "-1 -1 -1 -1000 -1000 -1000 -10"
    )
    if det.confidence < 1.0:
        line += f" {_logit(det.confidence):.6f}"
    return line


def _encode(lines: list[str]) -> bytes:
    return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


def write_results(fmt: str, trajectories: TrajectorySet, *, object_type: str = "Car") -> bytes:
    """Serialize a trajectory set; rows ordered by frame, then target id."""
    if fmt not in FORMATS:
        raise ParseError(f"unknown format {fmt!r}, expected one of {FORMATS}")
    rows = sorted(
        ((det.frame, traj.target_id, det) for traj in trajectories.trajectories for det in traj.detections),
        key=lambda r: (r[0], r[1]),
    )
    return _encode([_format_row(fmt, frame, tid, det, object_type) for frame, tid, det in rows])


def write_detections(fmt: str, detections: DetectionSet, *, object_type: str = "Car") -> bytes:
    """Serialize unassociated detections in frame order; every row carries id -1."""
    if fmt not in FORMATS:
        raise ParseError(f"unknown format {fmt!r}, expected one of {FORMATS}")
    return _encode([_format_row(fmt, det.frame, -1, det, object_type) for det in detections.detections])


# --------------------------------------------------------------------------- #
# Synthetic sequences
# --------------------------------------------------------------------------- #
@dataclass
class _Target:
    target_id: int
    cx: float
    cy: float
    vx: float
    vy: float
    height: float
    width: float
    boxes: list[Detection] = field(default_factory=list)


def _spawn(rng: np.random.Generator, config: SynthConfig, target_id: int) -> _Target:
    height = rng.uniform(*config.box_height_range)
    width = height * config.aspect_ratio
    speed = rng.uniform(*config.velocity_range)
    angle = rng.uniform(0.0, 2.0 * math.pi)
    cx = rng.uniform(0.1, 0.9) * config.image_width
    cy = rng.uniform(0.2, 0.8) * config.image_height
    return _Target(target_id, cx, cy, speed * math.cos(angle), speed * math.sin(angle), height, width)


def _inside(config: SynthConfig, cx: float, cy: float) -> bool:
    return 0.0 <= cx <= config.image_width and 0.0 <= cy <= config.image_height


def generate_synthetic(
    config: SynthConfig,
    seed: int,
    *,
    sequence_id: str = "synth",
) -> tuple[DetectionSet, TrajectorySet]:
    config.validate()
    rng = np.random.default_rng(seed)

    next_id = 0
    alive: list[_Target] = []
    finished: list[_Target] = []
    detections: list[Detection] = []

    for _ in range(config.initial_objects):
        alive.append(_spawn(rng, config, next_id))
        next_id += 1

    for frame in range(config.frame_count):
        if frame > 0:
            for _ in range(int(rng.poisson(config.birth_rate))):
                alive.append(_spawn(rng, config, next_id))
                next_id += 1

        survivors: list[_Target] = []
        frame_dets: list[Detection] = []
        for target in alive:
            if target.boxes:
                target.cx += target.vx + rng.normal(0.0, config.jitter)
                target.cy += target.vy + rng.normal(0.0, config.jitter)
            if not _inside(config, target.cx, target.cy):
                finished.append(target)
                continue
            gt_box = BoundingBox(
                target.cx - 0.5 * target.width, target.cy - 0.5 * target.height, target.width, target.height
            )
            target.boxes.append(Detection(frame, gt_box, 1.0))

            if rng.random() >= config.miss_rate:
                noise = rng.normal(0.0, config.jitter, size=4)
                box = BoundingBox(
                    gt_box.left + noise[0],
                    gt_box.top + noise[1],
                    max(1.0, gt_box.width + noise[2]),
                    max(1.0, gt_box.height + noise[3]),
                )
                conf = _clamp01(config.tp_confidence + rng.normal(0.0, config.confidence_noise))
                frame_dets.append(Detection(frame, box, conf))

            if rng.random() < config.death_probability:
                finished.append(target)
            else:
                survivors.append(target)
        alive = survivors

        for _ in range(int(rng.poisson(config.false_positive_rate))):
            height = rng.uniform(*config.box_height_range)
            width = height * config.aspect_ratio
            box = BoundingBox(
                rng.uniform(0.0, config.image_width - width),
                rng.uniform(0.0, config.image_height - height),
                width,
                height,
            )
            conf = _clamp01(config.fp_confidence + rng.normal(0.0, config.confidence_noise))
            frame_dets.append(Detection(frame, box, conf))

        detections.extend(frame_dets)

    finished.extend(alive)
    groups = {t.target_id: t.boxes for t in finished}
    det_set = DetectionSet(
        sequence_id, tuple(detections), config.frame_count, config.image_width, config.image_height
    )
    return det_set, TrajectorySet.from_groups(sequence_id, groups)


def generate_benchmark(
    config: SynthConfig,
    seed: int,
    count: int,
    *,
    prefix: str = "synth",
) -> list[tuple[DetectionSet, TrajectorySet]]:
    """``count`` independent sequences, each seeded from one root seed."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [
        generate_synthetic(config, int(child.generate_state(1, dtype=np.uint64)[0]), sequence_id=f"{prefix}-{k:03d}")
        for k, child in enumerate(children)
    ]
