"""SGD with momentum, the learning-rate schedule, and 4-step alternation.

Each of the four phases trains a subset of the parameter map; the rest are
named in a frozen set and skipped entirely by the optimizer, which makes the
freeze contract bitwise rather than merely approximate. One image per
iteration; a single injected RNG drives epoch shuffles, augmentation coins,
and mini-batch sampling, so (seed, config, dataset) replays exactly.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .anchors import assign_roi_labels, assign_rpn_labels, generate_anchors, \
    sample_roi_minibatch, sample_rpn_minibatch
from .boxes import clip_batch, flip_batch
from .data import five_crop_augment, hflip_augment, raster_to_input, \
    resize_with_boxes
from .errors import ConfigError, NumericError
from .losses import detection_loss, rpn_loss
from .model import FEAT_STRIDE, backbone_forward, det_head_forward, \
    init_params, rpn_head_forward
from .proposals import extract_roi_features, generate_proposals

log = logging.getLogger(__name__)

PHASE_NAMES = ("rpn1", "det2", "rpn3", "det4")


@dataclass(frozen=True)
class SgdConfig:
    total_iters: int
    drop_after_iters: int
    base_lr: float = 0.001
    lr_drop_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005

    def __post_init__(self):
        if self.total_iters < 1 or self.drop_after_iters < 1:
            raise ConfigError("iteration counts must be positive")
        if self.drop_after_iters > self.total_iters:
            raise ConfigError(
                f"drop_after_iters {self.drop_after_iters} exceeds "
                f"total_iters {self.total_iters}")
        if self.base_lr <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive; momentum/decay non-negative")


def sgd_for_phase(plan, phase_index):
    """Schedule for one alternation phase, dropping the lr inside the phase."""
    total = plan.phase_iters[phase_index]
    return SgdConfig(
        total_iters=total,
        drop_after_iters=max(1, round(plan.lr_drop_fraction * total)),
        base_lr=plan.base_lr, lr_drop_factor=plan.lr_drop_factor,
        momentum=plan.momentum, weight_decay=plan.weight_decay)


def learning_rate(cfg: SgdConfig, iteration):
    """Step schedule: base_lr before the drop point, base_lr * factor from it on."""
    return cfg.base_lr if iteration < cfg.drop_after_iters \
        else cfg.base_lr * cfg.lr_drop_factor


def sgd_step(params, grads, velocity, cfg: SgdConfig, iteration, frozen=frozenset()):
    """One in-place momentum update; frozen names are not touched at all.

    Weight decay applies to weights only (names not ending in ".b").
    """
    lr = learning_rate(cfg, iteration)
    for name in sorted(params):
        if name in frozen:
            continue
        p = params[name]
        g = grads[name]
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name} at iteration {iteration}")
        wd = 0.0 if name.endswith(".b") else cfg.weight_decay
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = cfg.momentum * v + g + wd * p.data
        velocity[name] = v
        p.data -= lr * v


def copy_params(params):
    return {name: ad.Tensor(p.data.copy(), requires_grad=True, name=name)
            for name, p in params.items()}


def snapshot_params(params):
    """Plain arrays for bitwise comparison or serialization."""
    return {name: p.data.copy() for name, p in params.items()}


def params_from_arrays(arrays):
    return {name: ad.Tensor(arr.copy(), requires_grad=True, name=name)
            for name, arr in arrays.items()}


def freeze_names(params, prefixes):
    return frozenset(n for n in params if n.startswith(tuple(prefixes)))


@dataclass
class EpochSampler:
    """Seeded shuffle over dataset indices; state is checkpointable."""
    n: int
    order: np.ndarray = field(default=None)
    cursor: int = 0

    def next(self, rng):
        if self.order is None or self.cursor >= len(self.order):
            self.order = rng.permutation(self.n)
            self.cursor = 0
        idx = int(self.order[self.cursor])
        self.cursor += 1
        return idx


def _prepare_image(img, plan, rng):
    """Shared per-iteration preprocessing: optional flip, then resize."""
    flipped = plan.hflip and bool(rng.random() < 0.5)
    if flipped:
        img = hflip_augment(img)
    resized, scale = resize_with_boxes(img, plan.short_side, plan.max_side)
    return resized, scale, flipped


def _abort_with_trace(err, trace, phase):
    recent = ", ".join(f"{i}:{v:.4f}" for i, v in trace[-5:]) or "none"
    raise NumericError(
        f"{phase} aborted: {err}; recent losses [{recent}]") from err


def train_rpn(images, params, exp, sgd_cfg, rng, freeze=frozenset(),
              velocity=None, sampler=None, start_iter=0, iter_hook=None):
    """First-stage trainer: per-image anchor labels, 256-anchor batches.

    Returns (trace, velocity, sampler); trace is a list of (iteration, loss)
    covering [start_iter, total_iters). Pass velocity/sampler/start_iter from
    a saved state to resume exactly.
    """
    velocity = {} if velocity is None else velocity
    sampler = sampler or EpochSampler(len(images))
    trace = []
    plan = exp.train
    for iteration in range(start_iter, sgd_cfg.total_iters):
        try:
            img = images[sampler.next(rng)]
            resized, _, _ = _prepare_image(img, plan, rng)
            feats = backbone_forward(raster_to_input(resized.raster()), params, exp.model)
            fh, fw = feats.shape[1], feats.shape[2]
            anchors = generate_anchors(exp.anchors, fh, fw)
            labels = assign_rpn_labels(
                anchors, resized.gt_boxes(), resized.width, resized.height,
                training=True,
                force_best_anchor_positive=exp.anchors.force_best_anchor_positive)
            sample = sample_rpn_minibatch(labels, rng, plan.rpn_batch)
            out = rpn_head_forward(feats, params, exp.anchors.k)
            lb = rpn_loss(out.probs, out.deltas, labels, sample,
                          n_anchor_locations=fh * fw, cfg=exp.loss,
                          n_cls=sample.size)
            ad.backward(lb.total_node)
            sgd_step(params, ad.gradient_map(params), velocity, sgd_cfg,
                     iteration, freeze)
        except NumericError as e:
            _abort_with_trace(e, trace, "rpn training")
        trace.append((iteration, lb.total))
        if iter_hook is not None:
            iter_hook(iteration + 1, params, velocity, sampler)
    return trace, velocity, sampler


def train_fast_rcnn(images, proposals_per_image, params, exp, sgd_cfg, rng,
                    freeze=frozenset(), velocity=None, sampler=None,
                    start_iter=0, iter_hook=None):
    """Second-stage trainer over fixed proposals (original image coordinates).

    Proposals follow the image through flip and resize; ground-truth boxes
    are optionally appended as extra candidates before RoI sampling.
    """
    if len(proposals_per_image) != len(images):
        raise ConfigError(
            f"{len(proposals_per_image)} proposal sets for {len(images)} images")
    velocity = {} if velocity is None else velocity
    sampler = sampler or EpochSampler(len(images))
    trace = []
    plan = exp.train
    n_classes = exp.model.n_classes
    for iteration in range(start_iter, sgd_cfg.total_iters):
        try:
            idx = sampler.next(rng)
            img = images[idx]
            props = np.asarray(proposals_per_image[idx], dtype=np.float64).reshape(-1, 4)
            resized, scale, flipped = _prepare_image(img, plan, rng)
            if flipped and props.size:
                props = flip_batch(props, img.width)
            props = props * scale
            if props.size:
                props, degenerate = clip_batch(props, resized.width, resized.height)
                props = props[~degenerate]
            gt = resized.gt_boxes()
            if plan.append_gt_proposals and gt.size:
                props = np.concatenate([props, gt]) if props.size else gt
            if props.shape[0] == 0:
                log.warning("no rois for image %s at iteration %d; skipped",
                            img.image_id, iteration)
                continue
            roi_labels = assign_roi_labels(
                props, gt, resized.gt_classes(), fg_iou=plan.roi_fg_iou)
            sample = sample_roi_minibatch(
                roi_labels, rng, plan.roi_batch, plan.roi_fg_fraction)
            feats = backbone_forward(raster_to_input(resized.raster()), params, exp.model)
            roi_feats = [extract_roi_features(feats, props[i], FEAT_STRIDE)
                         for i in sample]
            out = det_head_forward(roi_feats, params, n_classes)
            lb = detection_loss(out.class_probs, out.deltas,
                                roi_labels.subset(sample),
                                np.arange(sample.size), n_classes, exp.loss)
            ad.backward(lb.total_node)
            sgd_step(params, ad.gradient_map(params), velocity, sgd_cfg,
                     iteration, freeze)
        except NumericError as e:
            _abort_with_trace(e, trace, "detector training")
        trace.append((iteration, lb.total))
        if iter_hook is not None:
            iter_hook(iteration + 1, params, velocity, sampler)
    return trace, velocity, sampler


def collect_proposals(images, params, exp):
    """Frozen-RPN proposals for every image, in original image coordinates."""
    out = []
    for img in images:
        resized, scale = resize_with_boxes(img, exp.train.short_side,
                                           exp.train.max_side)
        feats = backbone_forward(raster_to_input(resized.raster()), params, exp.model)
        rpn = rpn_head_forward(feats, params, exp.anchors.k)
        anchors = generate_anchors(exp.anchors, rpn.feat_h, rpn.feat_w)
        props = generate_proposals(
            anchors, rpn.object_probs, rpn.deltas.data, resized.width,
            resized.height, exp.proposals_train, training=True)
        out.append(props.boxes / scale)
    return out


@dataclass
class TrainResult:
    params: dict
    traces: dict            # phase name -> list of (iteration, loss)
    snapshots: dict         # phase name -> name -> ndarray, at phase end
    proposal_counts: dict   # phase name -> mean proposals per image


def alternate_train_4step(images, exp, rng, phase_hook=None):
    """The full alternating procedure, returning the unified detector.

    Phase 1 trains backbone+RPN from a fresh init; phase 2 trains a separate
    backbone+detector (same init) on phase-1 proposals; phase 3 freezes the
    phase-2 backbone and refines the RPN head from its phase-1 weights;
    phase 4 freezes backbone and RPN and refines the detector head on
    regenerated proposals. Snapshots of every phase end are kept so freeze
    contracts and ablations can be checked against the result.
    """
    if not images:
        raise ConfigError("training needs at least one image")
    if exp.train.five_crop:
        crops = []
        for img in images:
            crops.extend(five_crop_augment(img, exp.train.crop_size,
                                           exp.train.crop_retention))
        log.info("five-crop augmentation added %d crops to %d images",
                 len(crops), len(images))
        images = list(images) + crops
    init = init_params(rng, exp.model)
    traces, snapshots, prop_counts = {}, {}, {}

    def done(phase, params):
        snapshots[phase] = snapshot_params(params)
        if phase_hook is not None:
            phase_hook(phase, params)
        log.info("phase %s done; mean loss last 50: %.4f", phase,
                 float(np.mean([v for _, v in traces[phase][-50:]])))

    p1 = copy_params(init)
    traces["rpn1"], _, _ = train_rpn(
        images, p1, exp, sgd_for_phase(exp.train, 0), rng,
        freeze=freeze_names(p1, ("det.",)))
    done("rpn1", p1)
    props1 = collect_proposals(images, p1, exp)
    prop_counts["rpn1"] = float(np.mean([len(p) for p in props1]))

    p2 = copy_params(init)
    traces["det2"], _, _ = train_fast_rcnn(
        images, props1, p2, exp, sgd_for_phase(exp.train, 1), rng,
        freeze=freeze_names(p2, ("rpn.",)))
    done("det2", p2)

    p3 = copy_params(p2)
    for name, tensor in p1.items():
        if name.startswith("rpn."):
            p3[name] = ad.Tensor(tensor.data.copy(), requires_grad=True, name=name)
    traces["rpn3"], _, _ = train_rpn(
        images, p3, exp, sgd_for_phase(exp.train, 2), rng,
        freeze=freeze_names(p3, ("backbone.", "det.")))
    done("rpn3", p3)
    props3 = collect_proposals(images, p3, exp)
    prop_counts["rpn3"] = float(np.mean([len(p) for p in props3]))

    p4 = copy_params(p3)
    traces["det4"], _, _ = train_fast_rcnn(
        images, props3, p4, exp, sgd_for_phase(exp.train, 3), rng,
        freeze=freeze_names(p4, ("backbone.", "rpn.")))
    done("det4", p4)

    return TrainResult(p4, traces, snapshots, prop_counts)
