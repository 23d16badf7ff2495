"""The detector network: shared backbone, region-proposal head, detection head.

Parameters live in a flat name -> Tensor mapping. Names are dotted with one
of three prefixes (backbone. / rpn. / det.) that the training engine uses to
select which subnetwork a phase updates; weight-decay exemption keys off the
".b" bias suffix. The backbone is deliberately small: four 3x3 conv stages
with three 2x2 max-pools giving a total stride of 8, sized so full training
runs on a CPU in minutes.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError

FEAT_STRIDE = 8  # three 2x2 pools


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    backbone_channels: tuple = (16, 32, 48, 64)
    rpn_hidden: int = 512
    det_hidden: int = 256
    head_init_std: float = 0.01
    n_classes: int = 4
    k: int = 9  # anchors per feature location

    def __post_init__(self):
        if len(self.backbone_channels) != 4:
            raise ConfigError(
                f"backbone needs 4 stage widths, got {len(self.backbone_channels)}")
        if self.n_classes < 1 or self.k < 1:
            raise ConfigError("n_classes and k must be positive")

    @property
    def feature_channels(self):
        return self.backbone_channels[-1]


def _conv_param(rng, name, out_c, in_c, ksize, std):
    w = ad.Tensor(rng.normal(0.0, std, (out_c, in_c, ksize, ksize)),
                  requires_grad=True, name=f"{name}.w")
    b = ad.Tensor(np.zeros(out_c), requires_grad=True, name=f"{name}.b")
    return w, b


def _fc_param(rng, name, in_d, out_d, std):
    w = ad.Tensor(rng.normal(0.0, std, (in_d, out_d)),
                  requires_grad=True, name=f"{name}.w")
    b = ad.Tensor(np.zeros(out_d), requires_grad=True, name=f"{name}.b")
    return w, b


def init_params(rng, cfg: ModelConfig):
    """Freshly initialized parameter map, deterministic for a given rng state.

    Head weights draw from N(0, head_init_std^2); backbone weights scale as
    1/sqrt(fanIn) since no pretrained weights stand behind them. All biases
    start at zero.
    """
    params = {}

    def put(pair):
        w, b = pair
        for t in (w, b):
            if t.name in params:
                raise ContractError(f"duplicate parameter name {t.name}")
            params[t.name] = t

    in_c = cfg.in_channels
    for i, out_c in enumerate(cfg.backbone_channels, start=1):
        fan_in = in_c * 9
        put(_conv_param(rng, f"backbone.conv{i}", out_c, in_c, 3, 1.0 / np.sqrt(fan_in)))
        in_c = out_c

    std = cfg.head_init_std
    feat_c = cfg.feature_channels
    put(_conv_param(rng, "rpn.conv", cfg.rpn_hidden, feat_c, 3, std))
    put(_conv_param(rng, "rpn.cls", 2 * cfg.k, cfg.rpn_hidden, 1, std))
    put(_conv_param(rng, "rpn.reg", 4 * cfg.k, cfg.rpn_hidden, 1, std))

    put(_fc_param(rng, "det.fc1", feat_c * 7 * 7, cfg.det_hidden, std))
    put(_fc_param(rng, "det.fc2", cfg.det_hidden, cfg.det_hidden, std))
    put(_fc_param(rng, "det.cls", cfg.det_hidden, cfg.n_classes + 1, std))
    put(_fc_param(rng, "det.reg", cfg.det_hidden, 4 * cfg.n_classes, std))
    return params


def _conv_block(x, params, name, pad):
    out = ad.conv2d(x, params[f"{name}.w"], stride=1, pad=pad)
    return ad.add_channel_bias(out, params[f"{name}.b"])


def backbone_forward(image, params, cfg: ModelConfig):
    """Shared feature map for a 3xHxW image tensor.

    The input is zero-padded on the bottom/right to a multiple of the feature
    stride, so the output extent is exactly ceil(H/8) x ceil(W/8).
    """
    x = image if isinstance(image, ad.Tensor) else ad.Tensor(image)
    if x.data.ndim != 3 or x.shape[0] != cfg.in_channels:
        raise ContractError(
            f"backbone expects ({cfg.in_channels}, H, W) input, got {x.shape}")
    _, h, w = x.shape
    if h < FEAT_STRIDE or w < FEAT_STRIDE:
        raise ConfigError(
            f"image {h}x{w} smaller than the feature stride {FEAT_STRIDE}")
    pad_h = (-h) % FEAT_STRIDE
    pad_w = (-w) % FEAT_STRIDE
    if pad_h or pad_w:
        x = ad.pad2d(x, 0, pad_h, 0, pad_w)

    x = ad.relu(_conv_block(x, params, "backbone.conv1", pad=1))
    x = ad.max_pool(x, 2, 2)
    x = ad.relu(_conv_block(x, params, "backbone.conv2", pad=1))
    x = ad.max_pool(x, 2, 2)
    x = ad.relu(_conv_block(x, params, "backbone.conv3", pad=1))
    x = ad.max_pool(x, 2, 2)
    x = ad.relu(_conv_block(x, params, "backbone.conv4", pad=1))

    eh, ew = -(-h // FEAT_STRIDE), -(-w // FEAT_STRIDE)
    if x.shape[1] != eh or x.shape[2] != ew:
        raise ContractError(
            f"feature extent {x.shape[1]}x{x.shape[2]} violates the stride "
            f"contract for input {h}x{w}")
    return x


@dataclass
class RpnOutput:
    """Per-anchor head outputs, flattened to match the anchor grid ordering."""
    probs: ad.Tensor        # (N, 2) softmaxed (background, object) pairs
    deltas: ad.Tensor       # (N, 4) tx, ty, tw, th
    score_map: ad.Tensor    # (2k, h, w) raw scores
    delta_map: ad.Tensor    # (4k, h, w)
    feat_h: int
    feat_w: int

    @property
    def object_probs(self):
        """Plain (N,) objectness array for proposal scoring."""
        return self.probs.data[:, 1].copy()


def _flatten_anchor_map(m, k, per_anchor):
    """(per_anchor * k, h, w) map -> (h * w * k, per_anchor) rows.

    Rows run row-major over locations, then over the k anchors in channel
    order, matching generate_anchors.
    """
    _, h, w = m.shape
    hwc = ad.transpose(m, (1, 2, 0))
    return ad.reshape(hwc, (h * w * k, per_anchor))


def rpn_head_forward(features, params, k):
    """Objectness and box regression for every anchor over the feature map.

    A 3x3 pad-1 conv lifts the shared features to an rpn_hidden-wide map with
    ReLU; two sibling 1x1 convs emit 2k scores and 4k deltas per location.
    Channel layout per anchor a: scores (2a, 2a+1), deltas 4a..4a+3.
    """
    hidden = ad.relu(_conv_block(features, params, "rpn.conv", pad=1))
    score_map = _conv_block(hidden, params, "rpn.cls", pad=0)
    delta_map = _conv_block(hidden, params, "rpn.reg", pad=0)
    if score_map.shape[0] != 2 * k or delta_map.shape[0] != 4 * k:
        raise ContractError(
            f"rpn head channels {score_map.shape[0]}/{delta_map.shape[0]} "
            f"do not match k={k}")
    _, h, w = features.shape
    probs = ad.softmax(_flatten_anchor_map(score_map, k, 2))
    deltas = _flatten_anchor_map(delta_map, k, 4)
    return RpnOutput(probs, deltas, score_map, delta_map, h, w)


@dataclass
class DetOutput:
    class_probs: ad.Tensor  # (R, K+1) rows on the simplex, column 0 background
    deltas: ad.Tensor       # (R, 4K) class-specific, no background slot


def det_head_forward(roi_features, params, n_classes):
    """Classification and per-class box regression for a batch of RoI patches.

    roi_features is a non-empty list of (C, 7, 7) tensors from the RoI
    extractor; they are flattened, run through two ReLU fc layers, and split
    into a softmaxed (K+1)-way classifier and 4K regression outputs.
    """
    if not roi_features:
        raise ContractError("det head needs at least one roi feature")
    for t in roi_features:
        if t.data.ndim != 3 or t.shape[1:] != (7, 7):
            raise ContractError(f"roi features must be (C, 7, 7), got {t.shape}")
    x = ad.stack_rows(roi_features)
    expected = params["det.fc1.w"].shape[0]
    if x.shape[1] != expected:
        raise ContractError(
            f"roi feature width {x.shape[1]} does not match det head ({expected})")
    x = ad.relu(ad.linear(x, params["det.fc1.w"], params["det.fc1.b"]))
    x = ad.relu(ad.linear(x, params["det.fc2.w"], params["det.fc2.b"]))
    scores = ad.linear(x, params["det.cls.w"], params["det.cls.b"])
    deltas = ad.linear(x, params["det.reg.w"], params["det.reg.b"])
    if scores.shape[1] != n_classes + 1 or deltas.shape[1] != 4 * n_classes:
        raise ContractError(
            f"det head outputs {scores.shape[1]}/{deltas.shape[1]} do not "
            f"match K={n_classes}")
    return DetOutput(ad.softmax(scores), deltas)
