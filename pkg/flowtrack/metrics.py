"""CLEAR MOT and trajectory-level scores.

Per frame, pairings from the previous matched frame are kept while their IoU
stays at or above the threshold; the remaining boxes are matched with the
Hungarian method on 1 - IoU, pairs below the threshold forbidden.

    MOTA   1 - (FN + FP + IDS) / GT
    MOTP   mean IoU over matched pairs
    FAR    false positives per frame
    MT/ML  GT tracks matched on >= 80% / < 20% of their boxes, PT otherwise

Zero denominators are reported with fixed values (precision 1.0 without
predictions, MOTA and recall 1.0 without ground truth, MOTP 0.0 without
matches) and listed in ``flags``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from flowtrack.common import ConfigError
from flowtrack.detections_io import TrajectorySet
from flowtrack.flow_graph import iou
from flowtrack.tracking import FORBIDDEN, hungarian

MOSTLY_TRACKED = 0.8
MOSTLY_LOST = 0.2


@dataclass(frozen=True)
class MetricsReport:
    mota: float
    motp: float
    recall: float
    precision: float
    far: float
    mt: int
    pt: int
    ml: int
    ids: int
    frag: int
    tp: int
    fp: int
    fn: int
    gt_boxes: int
    gt_tracks: int
    frames: int
    iou_sum: float
    flags: tuple[str, ...] = field(default=())

    @property
    def mt_pct(self) -> float:
        return self.mt / self.gt_tracks if self.gt_tracks else 0.0

    @property
    def pt_pct(self) -> float:
        return self.pt / self.gt_tracks if self.gt_tracks else 0.0

    @property
    def ml_pct(self) -> float:
        return self.ml / self.gt_tracks if self.gt_tracks else 0.0

    def as_dict(self) -> dict:
        out = asdict(self)
        out["flags"] = list(self.flags)
        out.update(mt_pct=self.mt_pct, pt_pct=self.pt_pct, ml_pct=self.ml_pct)
        return out


def from_tallies(
    *, tp: int, fp: int, fn: int, ids: int, frag: int, gt_boxes: int, iou_sum: float,
    frames: int, mt: int, pt: int, ml: int,
) -> MetricsReport:
    flags = []
    if gt_boxes:
        mota = 1.0 - (fn + fp + ids) / gt_boxes
        recall = tp / gt_boxes
    else:
        mota = recall = 1.0
        flags.append("gt_boxes=0: mota and recall set to 1.0")
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        precision = 1.0
        flags.append("predictions=0: precision set to 1.0")
    if tp:
        motp = iou_sum / tp
    else:
        motp = 0.0
        flags.append("matches=0: motp set to 0.0")
    far = fp / frames if frames else 0.0
    return MetricsReport(
        mota=mota, motp=motp, recall=recall, precision=precision, far=far,
        mt=mt, pt=pt, ml=ml, ids=ids, frag=frag, tp=tp, fp=fp, fn=fn,
        gt_boxes=gt_boxes, gt_tracks=mt + pt + ml, frames=frames, iou_sum=iou_sum,
        flags=tuple(flags),
    )


def evaluate(
    pred: TrajectorySet,
    gt: TrajectorySet,
    iou_threshold: float = 0.5,
    *,
    frame_count: int | None = None,
) -> MetricsReport:
    if not 0.0 < iou_threshold < 1.0:
        raise ConfigError("eval.iou_threshold", f"must be in (0, 1), got {iou_threshold}")
    gt_frames = gt.by_frame()
    pred_frames = pred.by_frame()
    all_frames = sorted(set(gt_frames) | set(pred_frames))
    if frame_count is None:
        frame_count = all_frames[-1] + 1 if all_frames else 0

    last_match: dict[int, int] = {}
    in_gap: dict[int, bool] = {}
    matched_boxes: dict[int, int] = {t.target_id: 0 for t in gt.trajectories}
    tp = fp = fn = ids = frag = 0
    iou_sum = 0.0

    for frame in all_frames:
        gts = gt_frames.get(frame, [])
        # Geometry order makes the Hungarian tie-breaking independent of prediction ids.
        preds = sorted(
            pred_frames.get(frame, []),
            key=lambda p: (p[1].box.left, p[1].box.top, p[1].box.width, p[1].box.height, p[1].confidence, p[0]),
        )
        pairs: list[tuple[int, int, float]] = []
        free_gt = set(range(len(gts)))
        free_pred = set(range(len(preds)))

        pred_pos = {pid: k for k, (pid, _) in enumerate(preds)}
        for g, (gid, gdet) in enumerate(gts):
            k = pred_pos.get(last_match.get(gid, -1))
            if k is None or k not in free_pred:
                continue
            overlap = iou(gdet.box, preds[k][1].box)
            if overlap >= iou_threshold:
                pairs.append((g, k, overlap))
                free_gt.discard(g)
                free_pred.discard(k)

        rows, cols = sorted(free_gt), sorted(free_pred)
        if rows and cols:
            overlaps = np.array([[iou(gts[g][1].box, preds[k][1].box) for k in cols] for g in rows])
            cost = np.where(overlaps >= iou_threshold, 1.0 - overlaps, FORBIDDEN)
            for r, c in hungarian(cost).pairs:
                if overlaps[r, c] >= iou_threshold:
                    pairs.append((rows[r], cols[c], float(overlaps[r, c])))
                    free_gt.discard(rows[r])
                    free_pred.discard(cols[c])

        for g, k, overlap in pairs:
            gid, pid = gts[g][0], preds[k][0]
            tp += 1
            iou_sum += overlap
            matched_boxes[gid] += 1
            if gid in last_match and last_match[gid] != pid:
                ids += 1
            if in_gap.get(gid):
                frag += 1
            in_gap[gid] = False
            last_match[gid] = pid
        for g in free_gt:
            gid = gts[g][0]
            if gid in last_match:
                in_gap[gid] = True
        fn += len(free_gt)
        fp += len(free_pred)

    mt = pt = ml = 0
    for traj in gt.trajectories:
        ratio = matched_boxes[traj.target_id] / len(traj) if len(traj) else 0.0
        if ratio >= MOSTLY_TRACKED:
            mt += 1
        elif ratio < MOSTLY_LOST:
            ml += 1
        else:
            pt += 1

    return from_tallies(
        tp=tp, fp=fp, fn=fn, ids=ids, frag=frag, gt_boxes=gt.box_count(), iou_sum=iou_sum,
        frames=frame_count, mt=mt, pt=pt, ml=ml,
    )


def merge_reports(reports: Iterable[MetricsReport]) -> MetricsReport:
    """Pool raw tallies over sequences and recompute every derived score."""
    keys = ("tp", "fp", "fn", "ids", "frag", "gt_boxes", "frames", "mt", "pt", "ml")
    totals = {k: 0 for k in keys}
    iou_sum = 0.0
    for report in reports:
        for k in keys:
            totals[k] += getattr(report, k)
        iou_sum += report.iou_sum
    return from_tallies(iou_sum=iou_sum, **totals)


_TABLE_ROWS = (
    ("MOTA", "mota", "{:.4f}"),
    ("MOTP", "motp", "{:.4f}"),
    ("Recall", "recall", "{:.4f}"),
    ("Precision", "precision", "{:.4f}"),
    ("FAR", "far", "{:.4f}"),
    ("MT", "mt", "{}"),
    ("PT", "pt", "{}"),
    ("ML", "ml", "{}"),
    ("IDS", "ids", "{}"),
    ("FRAG", "frag", "{}"),
    ("TP", "tp", "{}"),
    ("FP", "fp", "{}"),
    ("FN", "fn", "{}"),
    ("GT", "gt_boxes", "{}"),
)


def format_table(named: Sequence[tuple[str, MetricsReport]]) -> str:
    """Aligned text table, one column per named report."""
    headers = ["metric"] + [name for name, _ in named]
    body = [[label] + [fmt.format(getattr(r, attr)) for _, r in named] for label, attr, fmt in _TABLE_ROWS]
    widths = [max(len(row[i]) for row in [headers] + body) for i in range(len(headers))]
    lines = ["  ".join(cell.rjust(w) if i else cell.ljust(w) for i, (cell, w) in enumerate(zip(row, widths)))
             for row in [headers] + body]
    for name, report in named:
        lines += [f"note ({name}): {flag}" for flag in report.flags]
    return "\n".join(lines) + "\n"


def to_csv(report: MetricsReport) -> str:
    lines = ["metric,value"]
    for key, value in report.as_dict().items():
        if key == "flags":
            continue
        lines.append(f"{key},{value}")
    lines += [f"flag,{flag}" for flag in report.flags]
    return "\n".join(lines) + "\n"
