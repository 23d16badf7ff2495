"""NMS against brute force, the proposal pipeline, and RoI crop geometry."""

import numpy as np
import pytest

from defectdet import autodiff as ad
from defectdet.boxes import decode_batch
from defectdet.errors import ConfigError, ContractError
from defectdet.proposals import (
    ProposalConfig,
    crop_and_resize,
    extract_roi_features,
    generate_proposals,
    nms,
)

from .conftest import make_rng
from .oracles import (
    affine_crop_expected,
    affine_feature_map,
    nms_bruteforce,
)
from .test_boxes import random_boxes


@pytest.mark.parametrize("seed", range(8))
def test_nms_matches_bruteforce(seed):
    rng = make_rng(seed)
    n = int(rng.integers(1, 200))
    boxes = random_boxes(rng, n, extent=60.0, max_size=25.0)
    scores = rng.random(n)
    for thresh in (0.3, 0.5, 0.7):
        keep = nms(boxes, scores, thresh)
        assert keep.tolist() == nms_bruteforce(boxes, scores, thresh)


def test_nms_tie_prefers_lower_index():
    boxes = np.array([
        [0.0, 0.0, 10.0, 10.0],
        [1.0, 1.0, 11.0, 11.0],
        [30.0, 30.0, 40.0, 40.0],
    ])
    scores = np.array([0.5, 0.5, 0.5])
    keep = nms(boxes, scores, 0.3)
    assert keep.tolist() == [0, 2]


def test_nms_boundary_iou_not_suppressed():
    # IoU exactly at the threshold survives: suppression is strict
    boxes = np.array([[0.0, 0.0, 10.0, 10.0], [0.0, 0.0, 10.0, 5.0]])
    scores = np.array([0.9, 0.8])
    assert nms(boxes, scores, 0.5).tolist() == [0, 1]
    assert nms(boxes, scores, 0.49).tolist() == [0]


def test_nms_kept_count_monotone_in_threshold():
    rng = make_rng(11)
    boxes = random_boxes(rng, 150, extent=50.0, max_size=20.0)
    scores = rng.random(150)
    counts = [nms(boxes, scores, t).size for t in (0.3, 0.5, 0.7, 0.9)]
    assert counts == sorted(counts)


def test_nms_contract_errors():
    with pytest.raises(ContractError):
        nms(np.zeros((2, 4)), np.zeros(3))
    with pytest.raises(ConfigError):
        nms(np.zeros((0, 4)), np.zeros(0), iou_threshold=1.5)


def _uniform_proposal_inputs(rng, n, image=100.0):
    anchors = random_boxes(rng, n, extent=image - 20, max_size=15.0)
    scores = rng.random(n)
    deltas = rng.normal(scale=0.1, size=(n, 4))
    return anchors, scores, deltas


def test_generate_proposals_orders_and_caps():
    rng = make_rng(12)
    anchors, scores, deltas = _uniform_proposal_inputs(rng, 500)
    cfg = ProposalConfig(pre_nms_top_n=200, post_nms_top_n=40, nms_iou=0.7)
    ps = generate_proposals(anchors, scores, deltas, 100, 100, cfg)
    assert len(ps) <= 40
    assert (np.diff(ps.scores) <= 1e-12).all()  # descending
    assert (ps.boxes[:, 0] >= 0).all() and (ps.boxes[:, 2] <= 100).all()
    assert (ps.boxes[:, 2] > ps.boxes[:, 0]).all()


def test_generate_proposals_counts_degenerate():
    # push one anchor entirely off the image so clipping collapses it
    anchors = np.array([[10.0, 10.0, 20.0, 20.0], [40.0, 40.0, 50.0, 50.0]])
    deltas = np.array([[20.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]])
    scores = np.array([0.9, 0.8])
    ps = generate_proposals(anchors, scores, deltas, 100, 100)
    assert ps.n_degenerate_dropped == 1
    assert len(ps) == 1
    np.testing.assert_allclose(ps.boxes[0], anchors[1], atol=1e-12)


def test_generate_proposals_training_drops_cross_boundary():
    anchors = np.array([[-5.0, 10.0, 20.0, 20.0], [40.0, 40.0, 50.0, 50.0]])
    deltas = np.zeros((2, 4))
    scores = np.array([0.99, 0.5])
    train = generate_proposals(anchors, scores, deltas, 100, 100, training=True)
    assert len(train) == 1
    np.testing.assert_allclose(train.boxes[0], anchors[1], atol=1e-12)
    test = generate_proposals(anchors, scores, deltas, 100, 100, training=False)
    assert len(test) == 2  # kept, clipped instead


def test_generate_proposals_keeps_tiny_boxes():
    # a 3 px proposal well below the feature stride must survive
    anchors = np.array([[50.0, 50.0, 53.0, 53.0]])
    ps = generate_proposals(anchors, np.array([0.9]), np.zeros((1, 4)), 100, 100)
    assert len(ps) == 1
    np.testing.assert_allclose(ps.boxes[0], anchors[0], atol=1e-12)


def test_generate_proposals_decode_matches_library_decode():
    rng = make_rng(13)
    anchors, scores, deltas = _uniform_proposal_inputs(rng, 50)
    cfg = ProposalConfig(pre_nms_top_n=50, post_nms_top_n=50, nms_iou=1.0)
    ps = generate_proposals(anchors, scores, deltas, 100, 100, cfg)
    expected, _ = decode_batch(anchors, deltas)
    order = np.argsort(-scores, kind="stable")
    np.testing.assert_allclose(ps.boxes, np.clip(expected[order], 0, 100),
                               atol=1e-12)


def test_crop_and_resize_matches_affine_oracle():
    rng = make_rng(14)
    maps, coeffs = affine_feature_map(3, 12, 10, rng)
    feat = ad.Tensor(maps)
    for _ in range(20):
        x1, y1 = rng.uniform(0, 40, size=2)
        w, h = rng.uniform(2, 30, size=2)
        roi = (x1, y1, min(x1 + w, 72.0), min(y1 + h, 88.0))
        out = crop_and_resize(feat, roi, feat_stride=8, out_size=14)
        expected = affine_crop_expected(coeffs, roi, 8, 14)
        np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-9)


def test_crop_and_resize_corners_inclusive():
    rng = make_rng(15)
    maps, coeffs = affine_feature_map(1, 8, 8, rng)
    roi = (8.0, 16.0, 40.0, 48.0)
    out = crop_and_resize(ad.Tensor(maps), roi, feat_stride=8, out_size=5)
    a, b, d = coeffs[0]
    assert out.data[0, 0, 0] == pytest.approx(a + b * 2.0 + d * 1.0, abs=1e-9)
    assert out.data[0, -1, -1] == pytest.approx(a + b * 6.0 + d * 5.0, abs=1e-9)


def test_crop_and_resize_subpixel_roi():
    # a roi much smaller than one feature cell still yields a full grid
    rng = make_rng(16)
    maps, coeffs = affine_feature_map(2, 6, 6, rng)
    out = crop_and_resize(ad.Tensor(maps), (10.0, 10.0, 13.0, 13.0), 8, 14)
    expected = affine_crop_expected(coeffs, (10.0, 10.0, 13.0, 13.0), 8, 14)
    np.testing.assert_allclose(out.data, expected, atol=1e-9)


def test_crop_and_resize_rejects_bad_inputs():
    feat = ad.Tensor(np.zeros((1, 4, 4)))
    with pytest.raises(ContractError):
        crop_and_resize(feat, (5.0, 5.0, 5.0, 9.0), 8)
    with pytest.raises(ConfigError):
        crop_and_resize(feat, (0.0, 0.0, 8.0, 8.0), 8, out_size=1)


def test_extract_roi_features_shape_and_gradient():
    rng = make_rng(17)
    feat = ad.Tensor(rng.normal(size=(5, 9, 9)), requires_grad=True)
    out = extract_roi_features(feat, (4.0, 4.0, 30.0, 30.0), 8)
    assert out.shape == (5, 7, 7)
    ad.backward(ad.sum_all(out))
    assert np.isfinite(feat.grad).all()
    assert np.abs(feat.grad).sum() > 0
