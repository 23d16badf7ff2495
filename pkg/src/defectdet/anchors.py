"""Anchor grids, RPN/RoI label assignment, and mini-batch sampling.

Label values follow the ternary scheme: POSITIVE anchors train the
objectness head toward "object", NEGATIVE toward "background", IGNORE
anchors contribute nothing. All randomness flows through an injected
`numpy.random.Generator`, so per-image assignment is pure and replayable.
"""

import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .boxes import encode_batch, iou_matrix
from .errors import ConfigError, ContractError

log = logging.getLogger(__name__)

POSITIVE = 1
NEGATIVE = 0
IGNORE = -1

# The objectness label rules: above the high bound against any ground-truth
# box is positive, below the low bound against all of them is negative, the
# closed band in between is ignored.
RPN_POSITIVE_IOU = 0.7
RPN_NEGATIVE_IOU = 0.3


@dataclass(frozen=True)
class AnchorGridConfig:
    """One anchor per (location, ratio, scale) triple; k = len(scales) * len(ratios)."""
    stride: int = 8
    scales: tuple = (64.0, 128.0, 256.0)
    ratios: tuple = (0.5, 1.0, 2.0)  # height / width
    force_best_anchor_positive: bool = False

    def __post_init__(self):
        if not self.scales or not self.ratios:
            raise ConfigError("anchor config needs at least one scale and one ratio")
        if self.stride < 1:
            raise ConfigError(f"anchor stride must be >= 1, got {self.stride}")

    @property
    def k(self):
        return len(self.scales) * len(self.ratios)


@lru_cache(maxsize=32)
def _grid_cached(stride, scales, ratios, feat_h, feat_w):
    # one anchor template per (ratio, scale): area scale^2 with h/w = ratio
    templates = []
    for ratio in ratios:
        for scale in scales:
            w = scale / np.sqrt(ratio)
            h = scale * np.sqrt(ratio)
            templates.append((-0.5 * w, -0.5 * h, 0.5 * w, 0.5 * h))
    templates = np.array(templates)
    cx = (np.arange(feat_w) + 0.5) * stride
    cy = (np.arange(feat_h) + 0.5) * stride
    centers = np.stack([
        np.repeat(cy, feat_w),
        np.tile(cx, feat_h),
    ], axis=1)  # row-major over (i, j)
    shifts = np.stack([centers[:, 1], centers[:, 0], centers[:, 1], centers[:, 0]], axis=1)
    anchors = (shifts[:, None, :] + templates[None, :, :]).reshape(-1, 4)
    anchors.setflags(write=False)
    return anchors


def generate_anchors(cfg: AnchorGridConfig, feat_h, feat_w):
    """All k * feat_h * feat_w anchors for a feature map, as an (N, 4) array.

    Ordering is row-major over locations, then ratio-major / scale-minor
    within a location; the RPN head's channel layout must match it.
    """
    if feat_h < 1 or feat_w < 1:
        raise ContractError(f"feature extent must be positive, got {feat_h}x{feat_w}")
    return _grid_cached(cfg.stride, tuple(cfg.scales), tuple(cfg.ratios), feat_h, feat_w)


def cross_boundary_mask(anchors, image_w, image_h):
    """True for anchors that stick out of the image."""
    return ((anchors[:, 0] < 0.0) | (anchors[:, 1] < 0.0)
            | (anchors[:, 2] > image_w) | (anchors[:, 3] > image_h))


@dataclass
class AnchorLabelSet:
    """Per-anchor ternary labels plus regression targets for the positives.

    `matched_gt` is -1 and `targets` rows are NaN wherever the label is not
    positive, so accidental use of an undefined target fails loudly.
    """
    labels: np.ndarray          # int8, POSITIVE / NEGATIVE / IGNORE
    matched_gt: np.ndarray      # intp, ground-truth index, -1 if not positive
    targets: np.ndarray         # (N, 4) float64, NaN rows for non-positives
    max_iou: np.ndarray = field(repr=False, default=None)

    @property
    def positive_indices(self):
        return np.flatnonzero(self.labels == POSITIVE)

    @property
    def negative_indices(self):
        return np.flatnonzero(self.labels == NEGATIVE)


def assign_rpn_labels(anchors, gt_boxes, image_w, image_h, training,
                      force_best_anchor_positive=False):
    """Ternary objectness labels for every anchor.

    During training, cross-boundary anchors are ignored before any
    thresholding. With no ground truth, every in-bounds anchor is negative.
    The optional best-anchor fallback marks, per ground-truth box, the
    highest-IoU eligible anchor positive even below the threshold.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    n = anchors.shape[0]
    labels = np.full(n, NEGATIVE, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.intp)
    targets = np.full((n, 4), np.nan)

    excluded = cross_boundary_mask(anchors, image_w, image_h) if training \
        else np.zeros(n, dtype=bool)
    labels[excluded] = IGNORE

    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if gt.shape[0] == 0:
        return AnchorLabelSet(labels, matched, targets, np.zeros(n))

    overlaps = iou_matrix(anchors, gt)
    max_iou = overlaps.max(axis=1)
    argmax_gt = overlaps.argmax(axis=1)

    eligible = ~excluded
    positive = eligible & (max_iou > RPN_POSITIVE_IOU)
    negative = eligible & (max_iou < RPN_NEGATIVE_IOU)
    labels[eligible] = IGNORE  # the [0.3, 0.7] band
    labels[negative] = NEGATIVE
    labels[positive] = POSITIVE

    if force_best_anchor_positive:
        masked = np.where(eligible[:, None], overlaps, -1.0)
        best = masked.argmax(axis=0)  # first index wins ties
        ok = masked[best, np.arange(gt.shape[0])] > 0.0
        labels[best[ok]] = POSITIVE
        positive = labels == POSITIVE

    pos_idx = np.flatnonzero(positive)
    if pos_idx.size:
        matched[pos_idx] = argmax_gt[pos_idx]
        targets[pos_idx] = encode_batch(anchors[pos_idx], gt[argmax_gt[pos_idx]])
    return AnchorLabelSet(labels, matched, targets, max_iou)


def sample_rpn_minibatch(label_set: AnchorLabelSet, rng, size=256):
    """Sampled anchor indices: up to size/2 positives, the rest negatives.

    Short supply on either side shrinks the batch rather than inventing
    labels; a total shortfall is logged. Ignored anchors are never sampled.
    """
    if size % 2:
        raise ContractError(f"rpn mini-batch size must be even, got {size}")
    pos = label_set.positive_indices
    neg = label_set.negative_indices
    n_pos = min(pos.size, size // 2)
    chosen_pos = rng.choice(pos, n_pos, replace=False) if n_pos else np.empty(0, np.intp)
    n_neg = min(neg.size, size - n_pos)
    chosen_neg = rng.choice(neg, n_neg, replace=False) if n_neg else np.empty(0, np.intp)
    if n_pos + n_neg < size:
        log.warning("rpn mini-batch short: wanted %d anchors, sampled %d",
                    size, n_pos + n_neg)
    return np.sort(np.concatenate([chosen_pos, chosen_neg]).astype(np.intp))


BACKGROUND = 0


@dataclass
class RoiLabelSet:
    """Per-proposal class labels (0 = background) and foreground targets."""
    class_labels: np.ndarray    # intp, in [0, K]
    targets: np.ndarray         # (R, 4) float64, NaN rows for background
    max_iou: np.ndarray = field(repr=False, default=None)

    @property
    def foreground_indices(self):
        return np.flatnonzero(self.class_labels != BACKGROUND)

    @property
    def background_indices(self):
        return np.flatnonzero(self.class_labels == BACKGROUND)

    def __len__(self):
        return self.class_labels.shape[0]

    def subset(self, indices):
        """Labels restricted to the given proposal indices, in order."""
        idx = np.asarray(indices, dtype=np.intp)
        return RoiLabelSet(self.class_labels[idx], self.targets[idx],
                           None if self.max_iou is None else self.max_iou[idx])


def assign_roi_labels(proposals, gt_boxes, gt_classes, fg_iou=0.5):
    """Second-stage labels: IoU >= fg_iou against some ground truth makes a
    proposal foreground with that box's class; everything else is background.
    """
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    classes = np.asarray(gt_classes, dtype=np.intp)
    r = proposals.shape[0]
    labels = np.zeros(r, dtype=np.intp)
    targets = np.full((r, 4), np.nan)
    if gt.shape[0] == 0 or r == 0:
        return RoiLabelSet(labels, targets, np.zeros(r))
    overlaps = iou_matrix(proposals, gt)
    max_iou = overlaps.max(axis=1)
    argmax_gt = overlaps.argmax(axis=1)
    fg = max_iou >= fg_iou
    labels[fg] = classes[argmax_gt[fg]]
    fg_idx = np.flatnonzero(fg)
    if fg_idx.size:
        targets[fg_idx] = encode_batch(proposals[fg_idx], gt[argmax_gt[fg_idx]])
    return RoiLabelSet(labels, targets, max_iou)


def sample_roi_minibatch(roi_labels: RoiLabelSet, rng, size=128, fg_fraction=0.25):
    """Sampled RoI indices: ceil(fg_fraction * size) foreground, rest background.

    Missing background is padded with extra foreground (and vice versa) before
    shrinking the batch; shortage is logged.
    """
    if size < 4:
        raise ContractError(f"roi mini-batch size must be >= 4, got {size}")
    fg = roi_labels.foreground_indices
    bg = roi_labels.background_indices
    want_fg = int(np.ceil(fg_fraction * size))
    n_fg = min(fg.size, want_fg)
    chosen_fg = rng.choice(fg, n_fg, replace=False) if n_fg else np.empty(0, np.intp)
    n_bg = min(bg.size, size - n_fg)
    chosen_bg = rng.choice(bg, n_bg, replace=False) if n_bg else np.empty(0, np.intp)
    if n_fg + n_bg < size:
        spare_fg = np.setdiff1d(fg, chosen_fg, assume_unique=True)
        pad = min(spare_fg.size, size - n_fg - n_bg)
        if pad:
            chosen_fg = np.concatenate([chosen_fg, rng.choice(spare_fg, pad, replace=False)])
        if n_fg + n_bg + pad < size:
            log.warning("roi mini-batch short: wanted %d rois, sampled %d",
                        size, n_fg + n_bg + pad)
    return np.sort(np.concatenate([chosen_fg, chosen_bg]).astype(np.intp))
