"""Scoring detections: greedy matching, per-class AP, and report files.

Builds a small ground-truth split by hand, fabricates detection records of
varying quality, and walks through what the evaluator does with them.
"""

import sys
import tempfile
from pathlib import Path

from defectdet.boxes import Box
from defectdet.data import AnnotatedImage, ObjectAnnotation
from defectdet.evaluation import (DetectionRecord, format_report, mean_ap,
                                  read_detections, write_detections)

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
classes = {1: "insulator", 2: "pole-and-tower"}


def gt(image_id, *objs):
    return AnnotatedImage(image_id, 200, 200,
                          tuple(ObjectAnnotation(c, Box(*b)) for c, b in objs))


images = [
    gt("im0", (1, (10, 10, 50, 50)), (2, (100, 100, 160, 180))),
    gt("im1", (1, (20, 30, 60, 70)), (1, (120, 40, 160, 80))),
]

detections = [
    DetectionRecord("im0", 1, Box(12, 11, 52, 49), 0.95),   # good hit
    DetectionRecord("im0", 2, Box(98, 102, 158, 178), 0.90),  # good hit
    DetectionRecord("im1", 1, Box(21, 31, 59, 69), 0.85),   # good hit
    DetectionRecord("im1", 1, Box(25, 33, 64, 72), 0.80),   # duplicate: FP
    DetectionRecord("im1", 1, Box(0, 120, 40, 160), 0.70),  # background: FP
    # the second insulator in im1 is never found: a miss
]

result = mean_ap(detections, images, classes, iou_thresh=0.5)
for cid, ap in result.per_class_ap.items():
    print(f"AP[{classes[cid]}] = {ap:.4f}")
print(f"mAP = {result.map:.4f}")
print("insulator PR points (recall, precision):")
for r, p in result.pr_curves[1]:
    print(f"  ({r:.3f}, {p:.3f})")

# Records round-trip through a JSON-lines file, one detection per line.
out.mkdir(parents=True, exist_ok=True)
path = out / "detections.jsonl"
write_detections(detections, path)
assert read_detections(path) == detections
print(f"\nwrote and re-read {len(detections)} records via {path}")

rows = [{"label": "native", "map": result.map,
         "per_class": result.per_class_ap}]
print("\n" + format_report(rows, classes, header_lines=["demo run"]), end="")
