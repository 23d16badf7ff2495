"""Running a trained detector on images to produce scored detections."""

import numpy as np

from .anchors import generate_anchors
from .boxes import Box, clip_batch, decode_batch
from .data import raster_to_input, resize_with_boxes
from .evaluation import DetectionRecord
from .model import FEAT_STRIDE, backbone_forward, det_head_forward, \
    rpn_head_forward
from .proposals import extract_roi_features, generate_proposals, nms


def run_detector(img, params, exp, short_side=None, max_side=None):
    """Detections for one annotated image, in its original coordinates.

    The image follows the same resize policy as training (overridable per
    call for scale sweeps), proposals come from the RPN with test-time
    clipping, and each class's boxes are decoded from its own regression
    slot, score-filtered, and suppressed class-wise. Results are sorted by
    descending score and truncated to the configured per-image cap.
    """
    short = exp.train.short_side if short_side is None else short_side
    cap = exp.train.max_side if max_side is None else max_side
    resized, scale = resize_with_boxes(img, short, cap)
    feats = backbone_forward(raster_to_input(resized.raster()), params, exp.model)
    rpn = rpn_head_forward(feats, params, exp.anchors.k)
    anchors = generate_anchors(exp.anchors, rpn.feat_h, rpn.feat_w)
    props = generate_proposals(
        anchors, rpn.object_probs, rpn.deltas.data, resized.width,
        resized.height, exp.proposals_test, training=False)
    if len(props) == 0:
        return []
    roi_feats = [extract_roi_features(feats, b, FEAT_STRIDE) for b in props.boxes]
    out = det_head_forward(roi_feats, params, exp.model.n_classes)
    class_probs = out.class_probs.data
    deltas = out.deltas.data

    records = []
    for cid in range(1, exp.model.n_classes + 1):
        scores = class_probs[:, cid]
        picked = np.flatnonzero(scores >= exp.infer.score_floor)
        if picked.size == 0:
            continue
        decoded, _ = decode_batch(props.boxes[picked],
                                  deltas[picked, 4 * (cid - 1):4 * cid])
        clipped, degenerate = clip_batch(decoded, resized.width, resized.height)
        alive = np.flatnonzero(~degenerate)
        if alive.size == 0:
            continue
        boxes = clipped[alive]
        cls_scores = scores[picked[alive]]
        keep = nms(boxes, cls_scores, exp.infer.class_nms_iou)
        for i in keep:
            b = boxes[i] / scale
            records.append(DetectionRecord(
                img.image_id, cid, Box(*(float(v) for v in b)),
                float(cls_scores[i])))
    records.sort(key=lambda r: -r.score)
    return records[:exp.infer.max_detections]


def detect_split(images, params, exp, short_side=None, max_side=None):
    """Detections over a list of images, concatenated in input order."""
    records = []
    for img in images:
        records.extend(run_detector(img, params, exp, short_side, max_side))
    return records
