"""Anchor grid geometry, ternary labeling rules, and mini-batch sampling."""

import numpy as np
import pytest

from defectdet.anchors import (
    IGNORE,
    NEGATIVE,
    POSITIVE,
    AnchorGridConfig,
    assign_roi_labels,
    assign_rpn_labels,
    cross_boundary_mask,
    generate_anchors,
    sample_roi_minibatch,
    sample_rpn_minibatch,
)
from defectdet.boxes import encode_batch
from defectdet.errors import ConfigError, ContractError

from .conftest import make_rng


def test_k_and_config_validation():
    assert AnchorGridConfig().k == 9
    assert AnchorGridConfig(scales=(16.0,), ratios=(1.0, 2.0)).k == 2
    with pytest.raises(ConfigError):
        AnchorGridConfig(scales=())
    with pytest.raises(ConfigError):
        AnchorGridConfig(stride=0)


def test_grid_shape_ordering_and_centers():
    cfg = AnchorGridConfig(stride=8, scales=(32.0, 64.0), ratios=(0.5, 1.0, 2.0))
    h, w = 3, 4
    anchors = generate_anchors(cfg, h, w)
    assert anchors.shape == (h * w * cfg.k, 4)
    n_scales = len(cfg.scales)
    for i in range(h):
        for j in range(w):
            for ri, ratio in enumerate(cfg.ratios):
                for si, scale in enumerate(cfg.scales):
                    a = anchors[(i * w + j) * cfg.k + ri * n_scales + si]
                    cx, cy = 0.5 * (a[0] + a[2]), 0.5 * (a[1] + a[3])
                    assert cx == pytest.approx((j + 0.5) * 8, abs=1e-9)
                    assert cy == pytest.approx((i + 0.5) * 8, abs=1e-9)
                    assert a[2] - a[0] == pytest.approx(scale / np.sqrt(ratio), abs=1e-9)
                    assert a[3] - a[1] == pytest.approx(scale * np.sqrt(ratio), abs=1e-9)


def test_grid_fixed_values():
    cfg = AnchorGridConfig(stride=8, scales=(128.0,), ratios=(2.0,))
    a = generate_anchors(cfg, 1, 1)[0]
    assert a[2] - a[0] == pytest.approx(90.50966799, abs=1e-6)
    assert a[3] - a[1] == pytest.approx(181.01933598, abs=1e-6)
    square = generate_anchors(AnchorGridConfig(scales=(64.0,), ratios=(1.0,)), 1, 1)[0]
    np.testing.assert_allclose(square, [4 - 32, 4 - 32, 4 + 32, 4 + 32], atol=1e-9)


def test_grid_is_read_only():
    anchors = generate_anchors(AnchorGridConfig(), 2, 2)
    with pytest.raises(ValueError):
        anchors[0, 0] = 0.0


def test_cross_boundary_mask():
    anchors = np.array([
        [0.0, 0.0, 10.0, 10.0],
        [-1.0, 0.0, 10.0, 10.0],
        [0.0, 0.0, 10.0, 21.0],
        [5.0, 5.0, 20.0, 20.0],
    ])
    np.testing.assert_array_equal(cross_boundary_mask(anchors, 20, 20),
                                  [False, True, True, False])


def test_rpn_label_thresholds_are_strict():
    anchors = np.array([
        [0.0, 0.0, 10.0, 10.0],   # IoU 0.70 with gt0: in the ignore band
        [20.0, 0.0, 30.0, 10.0],  # IoU 0.30 with gt1: in the ignore band
        [40.0, 0.0, 50.0, 10.0],  # IoU 0.75 with gt2: positive
        [60.0, 0.0, 70.0, 10.0],  # IoU 0.20 with gt3: negative
    ])
    gt = np.array([
        [0.0, 0.0, 10.0, 7.0],
        [20.0, 0.0, 30.0, 3.0],
        [40.0, 0.0, 50.0, 7.5],
        [60.0, 0.0, 70.0, 2.0],
    ])
    ls = assign_rpn_labels(anchors, gt, 100, 100, training=False)
    np.testing.assert_array_equal(ls.labels, [IGNORE, IGNORE, POSITIVE, NEGATIVE])


def test_rpn_positive_targets_and_nan_elsewhere():
    anchors = np.array([[0.0, 0.0, 10.0, 10.0], [50.0, 50.0, 60.0, 60.0]])
    gt = np.array([[0.0, 0.0, 10.0, 8.0]])
    ls = assign_rpn_labels(anchors, gt, 100, 100, training=False)
    assert ls.labels[0] == POSITIVE and ls.labels[1] == NEGATIVE
    assert ls.matched_gt[0] == 0 and ls.matched_gt[1] == -1
    np.testing.assert_allclose(ls.targets[0], encode_batch(anchors[:1], gt)[0],
                               atol=1e-12)
    assert np.isnan(ls.targets[1]).all()


def test_rpn_training_excludes_cross_boundary_even_overlapping():
    anchors = np.array([
        [-2.0, 0.0, 10.0, 10.0],  # sticks out but overlaps gt well
        [0.0, 0.0, 10.0, 10.0],
    ])
    gt = np.array([[0.0, 0.0, 10.0, 10.0]])
    train = assign_rpn_labels(anchors, gt, 20, 20, training=True)
    assert train.labels[0] == IGNORE and train.labels[1] == POSITIVE
    infer = assign_rpn_labels(anchors, gt, 20, 20, training=False)
    assert infer.labels[0] == POSITIVE


def test_rpn_no_gt_all_negative():
    anchors = np.array([[0.0, 0.0, 10.0, 10.0], [-1.0, 0.0, 10.0, 10.0]])
    ls = assign_rpn_labels(anchors, np.empty((0, 4)), 20, 20, training=True)
    np.testing.assert_array_equal(ls.labels, [NEGATIVE, IGNORE])


def test_best_anchor_fallback_rescues_low_iou_gt():
    anchors = np.array([
        [0.0, 0.0, 20.0, 4.0],    # IoU with the thin gt below 0.3
        [0.0, 0.0, 40.0, 40.0],   # even worse overlap
    ])
    gt = np.array([[0.0, 1.0, 20.0, 3.0]])  # 20x2 sliver
    plain = assign_rpn_labels(anchors, gt, 50, 50, training=False)
    assert POSITIVE not in plain.labels
    forced = assign_rpn_labels(anchors, gt, 50, 50, training=False,
                               force_best_anchor_positive=True)
    assert forced.labels[0] == POSITIVE  # the better of the two
    assert forced.labels[1] != POSITIVE
    assert not np.isnan(forced.targets[0]).any()


def test_best_anchor_fallback_skips_excluded_anchors():
    anchors = np.array([
        [-1.0, 0.0, 20.0, 4.0],   # best overlap but cross-boundary
        [2.0, 0.0, 20.0, 4.0],
    ])
    gt = np.array([[0.0, 1.0, 20.0, 3.0]])
    forced = assign_rpn_labels(anchors, gt, 50, 50, training=True,
                               force_best_anchor_positive=True)
    assert forced.labels[0] == IGNORE
    assert forced.labels[1] == POSITIVE


def test_sample_rpn_minibatch_balance_and_padding():
    rng = make_rng(0)
    n = 400
    labels = np.full(n, NEGATIVE, dtype=np.int8)
    labels[:10] = POSITIVE
    labels[300:] = IGNORE
    ls_args = dict(matched_gt=np.full(n, -1, dtype=np.intp),
                   targets=np.full((n, 4), np.nan), max_iou=np.zeros(n))
    from defectdet.anchors import AnchorLabelSet
    ls = AnchorLabelSet(labels=labels, **ls_args)
    sample = sample_rpn_minibatch(ls, rng, size=256)
    assert sample.size == 256
    assert np.array_equal(sample, np.sort(sample))
    assert np.unique(sample).size == sample.size
    sampled_labels = labels[sample]
    assert (sampled_labels != IGNORE).all()
    assert (sampled_labels == POSITIVE).sum() == 10  # all available positives
    assert (sampled_labels == NEGATIVE).sum() == 246


def test_sample_rpn_minibatch_caps_positives_at_half():
    rng = make_rng(1)
    labels = np.full(64, POSITIVE, dtype=np.int8)
    from defectdet.anchors import AnchorLabelSet
    ls = AnchorLabelSet(labels=labels, matched_gt=np.zeros(64, dtype=np.intp),
                        targets=np.zeros((64, 4)), max_iou=np.ones(64))
    sample = sample_rpn_minibatch(ls, rng, size=32)
    assert (labels[sample] == POSITIVE).sum() == 16


def test_sample_rpn_minibatch_rejects_odd_size():
    from defectdet.anchors import AnchorLabelSet
    ls = AnchorLabelSet(labels=np.zeros(4, dtype=np.int8),
                        matched_gt=np.full(4, -1, dtype=np.intp),
                        targets=np.full((4, 4), np.nan), max_iou=np.zeros(4))
    with pytest.raises(ContractError):
        sample_rpn_minibatch(ls, make_rng(0), size=255)


def test_sample_rpn_minibatch_deterministic():
    labels = np.full(500, NEGATIVE, dtype=np.int8)
    labels[::7] = POSITIVE
    from defectdet.anchors import AnchorLabelSet
    ls = AnchorLabelSet(labels=labels, matched_gt=np.full(500, -1, dtype=np.intp),
                        targets=np.full((500, 4), np.nan), max_iou=np.zeros(500))
    s1 = sample_rpn_minibatch(ls, make_rng(9), size=64)
    s2 = sample_rpn_minibatch(ls, make_rng(9), size=64)
    np.testing.assert_array_equal(s1, s2)


def test_roi_labels_threshold_inclusive():
    proposals = np.array([
        [0.0, 0.0, 10.0, 10.0],   # IoU 1.0 with gt0
        [20.0, 0.0, 30.0, 10.0],  # IoU 0.5 with gt1: foreground
        [40.0, 0.0, 50.0, 10.0],  # IoU ~0.43: background
    ])
    gt = np.array([
        [0.0, 0.0, 10.0, 10.0],
        [20.0, 0.0, 30.0, 5.0],
        [40.0, 0.0, 50.0, 4.5],
    ])
    classes = np.array([2, 4, 1])
    rl = assign_roi_labels(proposals, gt, classes, fg_iou=0.5)
    np.testing.assert_array_equal(rl.class_labels, [2, 4, 0])
    np.testing.assert_allclose(rl.targets[1],
                               encode_batch(proposals[1:2], gt[1:2])[0], atol=1e-12)
    assert np.isnan(rl.targets[2]).all()


def test_roi_labels_pick_highest_overlap_class():
    proposals = np.array([[0.0, 0.0, 10.0, 10.0]])
    gt = np.array([[0.0, 0.0, 10.0, 8.0], [0.0, 0.0, 10.0, 12.0]])
    rl = assign_roi_labels(proposals, gt, np.array([1, 3]))
    # IoU 0.8 vs 10/12: the second gt wins
    assert rl.class_labels[0] == 3


def test_roi_labels_no_gt_all_background():
    rl = assign_roi_labels(np.array([[0.0, 0.0, 5.0, 5.0]]), np.empty((0, 4)),
                           np.empty(0, dtype=np.intp))
    assert rl.class_labels[0] == 0
    assert len(rl) == 1


def test_sample_roi_minibatch_quota_and_padding():
    from defectdet.anchors import RoiLabelSet
    labels = np.zeros(200, dtype=np.intp)
    labels[:50] = 1
    rl = RoiLabelSet(labels, np.full((200, 4), np.nan), np.zeros(200))
    sample = sample_roi_minibatch(rl, make_rng(2), size=128, fg_fraction=0.25)
    assert sample.size == 128
    assert (labels[sample] != 0).sum() == 32  # ceil(0.25 * 128)
    # background shortage: pad with spare foreground
    labels2 = np.ones(100, dtype=np.intp)
    labels2[:10] = 0
    rl2 = RoiLabelSet(labels2, np.zeros((100, 4)), np.ones(100))
    sample2 = sample_roi_minibatch(rl2, make_rng(3), size=64, fg_fraction=0.25)
    assert sample2.size == 64
    assert (labels2[sample2] == 0).sum() == 10


def test_sample_roi_minibatch_short_when_starved():
    from defectdet.anchors import RoiLabelSet
    labels = np.zeros(20, dtype=np.intp)
    labels[:4] = 2
    rl = RoiLabelSet(labels, np.full((20, 4), np.nan), np.zeros(20))
    sample = sample_roi_minibatch(rl, make_rng(4), size=64, fg_fraction=0.25)
    assert sample.size == 20  # every roi, still short of 64
    with pytest.raises(ContractError):
        sample_roi_minibatch(rl, make_rng(4), size=2)


def test_roi_subset_keeps_order():
    from defectdet.anchors import RoiLabelSet
    labels = np.array([0, 1, 2, 0, 3], dtype=np.intp)
    targets = np.arange(20, dtype=np.float64).reshape(5, 4)
    rl = RoiLabelSet(labels, targets, np.linspace(0, 1, 5))
    sub = rl.subset([4, 0, 2])
    np.testing.assert_array_equal(sub.class_labels, [3, 0, 2])
    np.testing.assert_array_equal(sub.targets[0], targets[4])
    assert len(sub) == 3
