"""Training losses for both stages.

Both stages share the same shape: a cross-entropy term over sampled
classification targets plus a smooth-L1 box term over the positive subset,
with independent normalizers and a balancing weight on the box term. The
probability fed to the log is floored so a confidently wrong head yields a
large finite loss instead of an infinity.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    rpn_lambda: float = 10.0
    det_lambda: float = 1.0
    # "batch": normalize the box term by the number of sampled rois;
    # "foreground": by the number of foreground rois only.
    det_reg_normalizer: str = "batch"

    def __post_init__(self):
        if self.det_reg_normalizer not in ("batch", "foreground"):
            raise ConfigError(
                f"det_reg_normalizer must be 'batch' or 'foreground', "
                f"got {self.det_reg_normalizer!r}")


@dataclass
class LossBreakdown:
    """Scalar summaries plus the live graph node for the combined loss."""
    cls_loss: float
    reg_loss: float
    total: float
    n_cls: int
    n_reg: int
    total_node: ad.Tensor


def smooth_l1(diff):
    """Elementwise robust penalty: quadratic inside the unit band, linear outside."""
    d = np.asarray(diff, dtype=np.float64)
    a = np.abs(d)
    return np.where(a < 1.0, 0.5 * d * d, a - 0.5)


def smooth_l1_sum(pred: ad.Tensor, target):
    """Differentiable sum of the robust penalty over pred - target."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractError(
            f"smooth_l1_sum shape mismatch: {pred.shape} vs {target.shape}")
    return ad.sum_all(ad.smooth_l1_elementwise(ad.add_const(pred, -target)))


def _cross_entropy_sum(probs: ad.Tensor, labels):
    """Sum over rows of -log p[label], with floored probabilities."""
    picked = ad.take_per_row(probs, labels)
    return ad.scale(ad.sum_all(ad.safe_log(picked, PROB_FLOOR)), -1.0)


def rpn_loss(obj_probs: ad.Tensor, box_deltas: ad.Tensor, label_set,
             sample_indices, n_anchor_locations, cfg: LossConfig = LossConfig(),
             n_cls=None):
    """First-stage loss over a sampled anchor mini-batch.

    obj_probs: (N, 2) per-anchor (background, object) probability pairs.
    box_deltas: (N, 4) per-anchor regression output.
    The classification term is the sampled log-loss sum divided by n_cls,
    the nominal mini-batch size (defaults to the actual sample size); the
    box term sums over sampled positives and is normalized by the number of
    anchor locations (feature cells), then weighted by rpn_lambda.
    """
    idx = np.asarray(sample_indices, dtype=np.intp)
    if idx.size == 0:
        raise ContractError("rpn loss needs a non-empty anchor sample")
    if n_anchor_locations < 1:
        raise ContractError(
            f"anchor location count must be positive, got {n_anchor_locations}")
    labels = label_set.labels[idx]
    if np.any(labels == -1):
        raise ContractError("sampled anchors must not contain ignored labels")

    n_cls = idx.size if n_cls is None else int(n_cls)
    if n_cls < 1:
        raise ContractError(f"n_cls must be positive, got {n_cls}")
    cls_sum = _cross_entropy_sum(ad.gather_rows(obj_probs, idx), labels)
    cls_term = ad.scale(cls_sum, 1.0 / n_cls)

    pos = idx[labels == 1]
    if pos.size:
        targets = label_set.targets[pos]
        if np.isnan(targets).any():
            raise ContractError("positive anchors carry undefined targets")
        reg_sum = smooth_l1_sum(ad.gather_rows(box_deltas, pos), targets)
    else:
        reg_sum = ad.Tensor(0.0)
    n_reg = int(n_anchor_locations)
    reg_term = ad.scale(reg_sum, cfg.rpn_lambda / n_reg)

    total = ad.add(cls_term, reg_term)
    return LossBreakdown(cls_term.item(), reg_term.item(), total.item(),
                         n_cls, n_reg, total)


def detection_loss(class_probs: ad.Tensor, box_deltas: ad.Tensor, roi_labels,
                   sample_indices, n_classes, cfg: LossConfig = LossConfig()):
    """Second-stage loss over a sampled RoI mini-batch.

    class_probs: (R, K+1) probability rows with column 0 = background.
    box_deltas: (R, 4 * K) class-specific deltas, no background slot; a
    foreground roi with class u reads columns [4(u-1), 4u). Background rois
    contribute nothing to the box term.
    """
    idx = np.asarray(sample_indices, dtype=np.intp)
    if idx.size == 0:
        raise ContractError("detection loss needs a non-empty roi sample")
    if class_probs.shape[1] != n_classes + 1:
        raise ContractError(
            f"expected {n_classes + 1} class columns, got {class_probs.shape[1]}")
    if box_deltas.shape[1] != 4 * n_classes:
        raise ContractError(
            f"expected {4 * n_classes} delta columns, got {box_deltas.shape[1]}")
    labels = roi_labels.class_labels[idx]

    n_cls = idx.size
    cls_sum = _cross_entropy_sum(ad.gather_rows(class_probs, idx), labels)
    cls_term = ad.scale(cls_sum, 1.0 / n_cls)

    fg = idx[labels != 0]
    if fg.size:
        fg_classes = roi_labels.class_labels[fg]
        targets = roi_labels.targets[fg]
        if np.isnan(targets).any():
            raise ContractError("foreground rois carry undefined targets")
        rows = ad.gather_rows(box_deltas, fg)
        cols = (4 * (fg_classes - 1))[:, None] + np.arange(4)[None, :]
        reg_sum = smooth_l1_sum(ad.take_columns(rows, cols), targets)
    else:
        reg_sum = ad.Tensor(0.0)
    n_reg = n_cls if cfg.det_reg_normalizer == "batch" else max(fg.size, 1)
    reg_term = ad.scale(reg_sum, cfg.det_lambda / n_reg)

    total = ad.add(cls_term, reg_term)
    return LossBreakdown(cls_term.item(), reg_term.item(), total.item(),
                         n_cls, n_reg, total)
