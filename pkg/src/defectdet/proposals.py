"""Region proposals: scored box selection, NMS, and RoI feature extraction.

The RoI extractor resamples the shared feature map with an align-corners
bilinear grid instead of quantized pooling bins, so proposals smaller than
the feature stride still produce a full, gradient-carrying feature patch.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .anchors import cross_boundary_mask
from .boxes import Box, clip_batch, decode_batch, iou_matrix
from .errors import ConfigError, ContractError


def nms(boxes, scores, iou_threshold=0.7):
    """Greedy non-maximum suppression, returning kept indices.

    Boxes are visited in descending score order (equal scores keep the lower
    original index first); each kept box suppresses later boxes whose IoU
    with it strictly exceeds the threshold.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if boxes.shape[0] != scores.shape[0]:
        raise ContractError(
            f"nms: {boxes.shape[0]} boxes vs {scores.shape[0]} scores")
    if not 0.0 <= iou_threshold <= 1.0:
        raise ConfigError(f"nms threshold must be in [0, 1], got {iou_threshold}")
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        if not rest.size:
            break
        ious = iou_matrix(boxes[i:i + 1], boxes[rest])[0]
        order = rest[ious <= iou_threshold]
    return np.asarray(keep, dtype=np.intp)


@dataclass(frozen=True)
class ProposalConfig:
    pre_nms_top_n: int = 6000
    post_nms_top_n: int = 300
    nms_iou: float = 0.7

    def __post_init__(self):
        if self.pre_nms_top_n < 1 or self.post_nms_top_n < 1:
            raise ConfigError("proposal top-n limits must be positive")


@dataclass(frozen=True)
class Proposal:
    """One candidate region with its objectness score."""
    box: Box
    objectness: float


@dataclass
class ProposalSet:
    """NMS survivors in descending objectness order."""
    boxes: np.ndarray       # (R, 4), clipped to the image
    scores: np.ndarray      # (R,)
    n_degenerate_dropped: int

    def __len__(self):
        return self.boxes.shape[0]

    def as_proposals(self):
        return [Proposal(Box.from_array(b), float(s))
                for b, s in zip(self.boxes, self.scores)]


def generate_proposals(anchors, obj_probs, deltas, image_w, image_h,
                       cfg: ProposalConfig = ProposalConfig(), training=False):
    """Decode, clip, and filter per-anchor box predictions into proposals.

    During training, anchors that cross the image boundary are discarded
    before scoring; at test time they are kept and their decoded boxes
    clipped. Boxes that collapse to zero extent after clipping are dropped
    and counted; tiny-but-nonzero boxes are kept deliberately. The survivors
    are score-sorted, truncated to pre_nms_top_n, suppressed, and truncated
    to post_nms_top_n.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    obj_probs = np.asarray(obj_probs, dtype=np.float64).reshape(-1)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    if anchors.shape[0] != obj_probs.shape[0] or anchors.shape[0] != deltas.shape[0]:
        raise ContractError(
            f"proposals: {anchors.shape[0]} anchors vs {obj_probs.shape[0]} "
            f"scores vs {deltas.shape[0]} deltas")
    if training:
        inside = ~cross_boundary_mask(anchors, image_w, image_h)
        anchors, obj_probs, deltas = anchors[inside], obj_probs[inside], deltas[inside]
    if anchors.shape[0] == 0:
        return ProposalSet(np.empty((0, 4)), np.empty(0), 0)
    decoded, _ = decode_batch(anchors, deltas)
    clipped, degenerate = clip_batch(decoded, image_w, image_h)
    valid = np.flatnonzero(~degenerate)
    n_dropped = int(degenerate.sum())
    if valid.size == 0:
        return ProposalSet(np.empty((0, 4)), np.empty(0), n_dropped)
    order = valid[np.argsort(-obj_probs[valid], kind="stable")][:cfg.pre_nms_top_n]
    boxes = clipped[order]
    scores = obj_probs[order]
    keep = nms(boxes, scores, cfg.nms_iou)[:cfg.post_nms_top_n]
    return ProposalSet(boxes[keep], scores[keep], n_dropped)


def crop_and_resize(features: ad.Tensor, roi, feat_stride, out_size=14):
    """Differentiable (C, out, out) resample of a feature-map region.

    The roi is given in image coordinates and divided by the feature stride;
    the sample grid places out_size points per axis with the region corners
    inclusive (out_size - 1 equal intervals) and reads the map with
    edge-clamped bilinear interpolation.
    """
    if out_size < 2:
        raise ConfigError(f"crop size must be >= 2 for an interior grid, got {out_size}")
    if isinstance(roi, Box):
        roi = roi.as_array()
    x1, y1, x2, y2 = (float(v) for v in np.asarray(roi, dtype=np.float64).reshape(4))
    if not (x2 > x1 and y2 > y1):
        raise ContractError(f"degenerate roi ({x1}, {y1}, {x2}, {y2})")
    fx1, fy1 = x1 / feat_stride, y1 / feat_stride
    fx2, fy2 = x2 / feat_stride, y2 / feat_stride
    steps = np.arange(out_size) / (out_size - 1)
    gy = fy1 + steps * (fy2 - fy1)
    gx = fx1 + steps * (fx2 - fx1)
    grid_y = np.repeat(gy, out_size)
    grid_x = np.tile(gx, out_size)
    c = features.shape[0]
    flat = ad.bilinear_sample(features, grid_y, grid_x)
    return ad.reshape(flat, (c, out_size, out_size))


def extract_roi_features(features: ad.Tensor, roi, feat_stride):
    """Standard pooled RoI patch: 14x14 crop halved to (C, 7, 7) by max pooling."""
    return ad.max_pool(crop_and_resize(features, roi, feat_stride, 14), 2, 2)
