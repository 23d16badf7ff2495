"""Detection scoring: greedy matching, per-class AP, mAP, and reports.

AP is the area under the interpolated precision-recall curve (monotone
envelope, continuous). Matching follows the usual protocol: detections in
descending score order claim the highest-IoU unmatched ground truth of
their class and image, counting as true positives at IoU >= the threshold.
"""

import csv
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._fsio import atomic_write_text
from .boxes import Box, iou_matrix
from .errors import ContractError, DatasetError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DetectionRecord:
    image_id: str
    class_id: int
    box: Box
    score: float

    def __post_init__(self):
        if not (np.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ContractError(f"detection score must be in [0, 1], got {self.score}")


@dataclass
class ApResult:
    per_class_ap: dict      # class id -> AP in [0, 1]
    map: float              # arithmetic mean over evaluated classes
    pr_curves: dict         # class id -> list of (recall, precision)


def match_detections(detections, gt_by_image, iou_thresh=0.5):
    """TP/FP flags for one class's detections across all images.

    detections: DetectionRecords of a single class, any order. gt_by_image
    maps image id to an (N, 4) array of that class's ground truth. Returns
    (order, flags): `order` sorts detections by descending score (ties keep
    input order) and flags align with it. Each ground truth box is claimed
    at most once, by the highest-IoU rule among still-unmatched boxes.
    """
    scores = np.array([d.score for d in detections])
    order = np.argsort(-scores, kind="stable")
    flags = np.zeros(order.size, dtype=bool)
    claimed = {img: np.zeros(arr.shape[0], dtype=bool)
               for img, arr in gt_by_image.items()}
    for rank, det_idx in enumerate(order):
        det = detections[det_idx]
        gts = gt_by_image.get(det.image_id)
        if gts is None or gts.shape[0] == 0:
            continue
        ious = iou_matrix(det.box.as_array()[None, :], gts)[0]
        open_mask = ~claimed[det.image_id]
        if not open_mask.any():
            continue
        ious = np.where(open_mask, ious, -1.0)
        best = int(np.argmax(ious))
        if ious[best] >= iou_thresh:
            flags[rank] = True
            claimed[det.image_id][best] = True
    return order, flags


def average_precision(flags, scores, num_gt):
    """Area under the monotone-envelope PR curve.

    flags/scores must be in descending score order. Returns None when there
    is no ground truth (the class is then excluded from mAP).
    """
    flags = np.asarray(flags, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    if flags.shape != scores.shape:
        raise ContractError(
            f"flags/scores length mismatch: {flags.shape} vs {scores.shape}")
    if scores.size and np.any(np.diff(scores) > 0):
        raise ContractError("detections must be sorted by descending score")
    if num_gt < 0:
        raise ContractError(f"num_gt must be non-negative, got {num_gt}")
    if num_gt == 0:
        log.warning("class with no ground truth: AP undefined, excluded")
        return None
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate(([0.0], recall))
    mpre = np.concatenate(([0.0], precision))
    envelope = np.maximum.accumulate(mpre[::-1])[::-1]
    return float(np.sum(np.diff(mrec) * envelope[1:]))


def _pr_points(flags, num_gt):
    tp = np.cumsum(flags)
    fp = np.cumsum(~np.asarray(flags, dtype=bool))
    if num_gt == 0 or len(flags) == 0:
        return []
    return list(zip((tp / num_gt).tolist(), (tp / (tp + fp)).tolist()))


def mean_ap(detections, images, classes, iou_thresh=0.5) -> ApResult:
    """Per-class AP over a split plus the arithmetic mean.

    `images` are AnnotatedImages providing ground truth; `classes` is the
    id -> name table. Classes without any ground truth are excluded from the
    mean with a warning. No detections at all gives AP 0 for every class
    with ground truth.
    """
    per_class, curves = {}, {}
    evaluated = []
    for cid in sorted(classes):
        gt_by_image = {}
        n_gt = 0
        for img in images:
            boxes = [o.box.as_array() for o in img.objects if o.class_id == cid]
            gt_by_image[img.image_id] = (
                np.stack(boxes) if boxes else np.empty((0, 4)))
            n_gt += len(boxes)
        dets = [d for d in detections if d.class_id == cid]
        order, flags = match_detections(dets, gt_by_image, iou_thresh)
        sorted_scores = np.array([dets[i].score for i in order])
        ap = average_precision(flags, sorted_scores, n_gt)
        if ap is None:
            continue
        per_class[cid] = ap
        curves[cid] = _pr_points(flags, n_gt)
        evaluated.append(ap)
    if not evaluated:
        raise ContractError("no class has ground truth; mAP undefined")
    return ApResult(per_class, float(np.mean(evaluated)), curves)


# ---------------------------------------------------------------------------
# detection record I/O (JSON lines)

def write_detections(records, path):
    lines = [json.dumps({
        "image": r.image_id,
        "class": r.class_id,
        "bbox": [r.box.x1, r.box.y1, r.box.x2, r.box.y2],
        "score": r.score,
    }) for r in records]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_detections(path):
    records, problems = [], []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{Path(path).name}:{lineno}"
            try:
                obj = json.loads(line)
                bbox = obj["bbox"]
                records.append(DetectionRecord(
                    str(obj["image"]), int(obj["class"]),
                    Box(*(float(v) for v in bbox)), float(obj["score"])))
            except (KeyError, TypeError, ValueError, ContractError) as e:
                problems.append(f"{where}: {e}")
            except json.JSONDecodeError as e:
                problems.append(f"{where}: invalid JSON ({e.msg})")
    if problems:
        raise DatasetError(
            f"{len(problems)} invalid detection record(s):\n" + "\n".join(problems))
    return records


# ---------------------------------------------------------------------------
# report tables (text and CSV), one row per evaluated setting

def _percent(v):
    return f"{100.0 * v:.2f}"


def format_report(rows, classes, header_lines=()):
    """Fixed-width table: label column, mAP, then per-class AP columns."""
    names = [classes[c] for c in sorted(classes)]
    cols = ["scale", "mAP"] + names
    table = [cols]
    for row in rows:
        cells = [str(row["label"]), _percent(row["map"])]
        for cid in sorted(classes):
            ap = row["per_class"].get(cid)
            cells.append("-" if ap is None else _percent(ap))
        table.append(cells)
    widths = [max(len(r[i]) for r in table) for i in range(len(cols))]
    out = [str(line) for line in header_lines]
    for r in table:
        out.append("  ".join(c.rjust(w) for c, w in zip(r, widths)))
    return "\n".join(out) + "\n"


def write_text_report(path, rows, classes, header_lines=()):
    atomic_write_text(path, format_report(rows, classes, header_lines))


def write_csv_report(path, rows, classes):
    names = [classes[c] for c in sorted(classes)]
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["scale", "mAP"] + names)
    for row in rows:
        cells = [row["label"], _percent(row["map"])]
        for cid in sorted(classes):
            ap = row["per_class"].get(cid)
            cells.append("" if ap is None else _percent(ap))
        writer.writerow(cells)
    atomic_write_text(path, buf.getvalue())
