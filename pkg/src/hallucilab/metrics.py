"""Detection quality metrics and result aggregation.

AP@50 follows the 101-point interpolation protocol: matching is greedy per
image in descending score order against unmatched same-class ground truth,
the precision-recall curve is built over the globally score-sorted
detections, and AP is the mean of interpolated precision over the recall
grid {0.00, 0.01, ..., 1.00}, averaged over classes present in the ground
truth.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import BBox, Detection, EmptyList, NoGroundTruth, OutOfRange, ShapeMismatch

# Each grid point is the correctly rounded i/100 (single division), so a
# recall value that equals i/100 as an exact rational compares equal to it.
RECALL_GRID = np.arange(101, dtype=np.float64) / 100.0


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0 for disjoint boxes."""
    ix = min(a.x2, b.x2) - max(a.x, b.x)
    iy = min(a.y2, b.y2) - max(a.y, b.y)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.w * a.h + b.w * b.h - inter
    return inter / union


def greedy_match(
    dets: Sequence[Detection], gts: Sequence[BBox], iou_threshold: float = 0.5
) -> list[bool]:
    """True/false-positive flags for detections in descending score order.

    Each detection (ties kept in input order) claims the highest-IoU still
    unmatched ground-truth box of its own class, provided IoU reaches the
    threshold; every other detection is a false positive.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise OutOfRange(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    matched = [False] * len(gts)
    flags = []
    for i in order:
        det = dets[i]
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if matched[j] or gt.cls != det.box.cls:
                continue
            v = iou(det.box, gt)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_threshold:
            matched[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def _class_ap(
    scored_flags: list[tuple[float, bool]], n_gt: int
) -> float:
    """AP for one class from globally ranked (score, is_tp) pairs."""
    if not scored_flags:
        return 0.0
    tps = np.array([f for _, f in scored_flags], dtype=np.float64)
    tp_cum = np.cumsum(tps)
    ranks = np.arange(1, len(tps) + 1, dtype=np.float64)
    precision = tp_cum / ranks
    recall = tp_cum / float(n_gt)
    # Envelope: best precision achievable at this recall or beyond.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    interp = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(interp.mean())


def average_precision_at_50(
    per_image: Sequence[tuple[Sequence[Detection], Sequence[BBox]]],
    iou_threshold: float = 0.5,
) -> float:
    """Dataset AP at the given IoU threshold over (detections, truths) pairs.

    Classes are those present in the ground truth; detections of absent
    classes are ignored. Cross-image score ties rank by (image index,
    within-image order) so the result is deterministic.
    """
    classes = sorted({gt.cls for _, gts in per_image for gt in gts})
    if not classes:
        raise NoGroundTruth("cannot compute AP with zero ground-truth boxes")
    aps = []
    for cls in classes:
        scored: list[tuple[float, int, int, bool]] = []
        n_gt = 0
        for img_idx, (dets, gts) in enumerate(per_image):
            gts_c = [g for g in gts if g.cls == cls]
            dets_c = [d for d in dets if d.box.cls == cls]
            n_gt += len(gts_c)
            flags = greedy_match(dets_c, gts_c, iou_threshold)
            order = sorted(range(len(dets_c)), key=lambda i: -dets_c[i].score)
            for rank, i in enumerate(order):
                scored.append((dets_c[i].score, img_idx, rank, flags[rank]))
        scored.sort(key=lambda t: (-t[0], t[1], t[2]))
        aps.append(_class_ap([(s, f) for s, _, _, f in scored], n_gt))
    return float(np.mean(aps))


def aggregate_seeds(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (n-1); std is 0 for one value."""
    if len(values) == 0:
        raise EmptyList("aggregate_seeds requires at least one value")
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise OutOfRange("aggregate_seeds requires finite values")
    mean = float(arr.mean())
    std = 0.0 if len(arr) == 1 else float(arr.std(ddof=1))
    return mean, std


# ---------------------------------------------------------------------------
# Result files

CSV_COLUMNS = ("experiment", "detector", "method", "seed", "ap50")


@dataclass(frozen=True)
class MetricsRow:
    experiment: str
    detector: str
    method: str
    seed: int
    ap50: float

    def __post_init__(self) -> None:
        for name in ("experiment", "detector", "method"):
            v = getattr(self, name)
            if not isinstance(v, str) or not v or "," in v or "\n" in v:
                raise OutOfRange(f"{name} must be a non-empty string without commas, got {v!r}")
        if not isinstance(self.seed, (int, np.integer)) or isinstance(self.seed, bool):
            raise OutOfRange(f"seed must be an integer, got {self.seed!r}")
        object.__setattr__(self, "seed", int(self.seed))
        if not np.isfinite(self.ap50) or not 0.0 <= self.ap50 <= 1.0:
            raise OutOfRange(f"ap50 must lie in [0, 1], got {self.ap50}")
        object.__setattr__(self, "ap50", float(self.ap50))


def append_metrics_rows(path: str | Path, rows: Sequence[MetricsRow]) -> None:
    """Append rows atomically: the whole file is rewritten to a temp path in
    the same directory and renamed over the original, so concurrent readers
    never observe a torn file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    existing = path.read_text(encoding="utf-8") if path.exists() else ""
    lines = [] if existing else [",".join(CSV_COLUMNS)]
    for row in rows:
        lines.append(
            f"{row.experiment},{row.detector},{row.method},{row.seed},{row.ap50!r}"
        )
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_text(existing + "\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def read_metrics_rows(path: str | Path) -> list[MetricsRow]:
    path = Path(path)
    if not path.exists():
        raise EmptyList(f"metrics file not found: {path}")
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_COLUMNS:
            raise ShapeMismatch(
                f"{path}: expected header {','.join(CSV_COLUMNS)}, got {reader.fieldnames}"
            )
        for rec in reader:
            rows.append(
                MetricsRow(
                    experiment=rec["experiment"],
                    detector=rec["detector"],
                    method=rec["method"],
                    seed=int(rec["seed"]),
                    ap50=float(rec["ap50"]),
                )
            )
    return rows


def summarize_rows(rows: Sequence[MetricsRow]) -> dict:
    """Aggregate per (experiment, method): mean/std over seeds.

    Duplicate (experiment, detector, method, seed) keys keep the last
    occurrence, matching append-only rerun semantics.
    """
    latest: dict[tuple[str, str, str, int], MetricsRow] = {}
    for row in rows:
        latest[(row.experiment, row.detector, row.method, row.seed)] = row
    grouped: dict[tuple[str, str, str], list[MetricsRow]] = {}
    for row in latest.values():
        grouped.setdefault((row.experiment, row.detector, row.method), []).append(row)
    summary: dict = {}
    for (experiment, detector, method), group in sorted(grouped.items()):
        group.sort(key=lambda r: r.seed)
        mean, std = aggregate_seeds([r.ap50 for r in group])
        summary.setdefault(experiment, {})[method] = {
            "detector": detector,
            "mean_ap50": mean,
            "std_ap50": std,
            "n_seeds": len(group),
            "seeds": [r.seed for r in group],
            "ap50": [r.ap50 for r in group],
        }
    return summary


def write_summary(path: str | Path, summary: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)
