"""Experiment configuration: one strict, hashable record of every knob.

Configs are nested frozen dataclasses parsed from JSON. Parsing rejects
unknown keys so a typo cannot silently fall back to a default, and the
canonical serialization (sorted keys, fixed separators) gives every config a
stable sha256 hash that reports and checkpoints embed for provenance.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass

from .anchors import AnchorGridConfig
from .errors import ConfigError
from .losses import LossConfig
from .model import ModelConfig
from .proposals import ProposalConfig
from .synthetic import SyntheticConfig


@dataclass(frozen=True)
class TrainPlan:
    """Schedule and sampling knobs for the 4-step alternating procedure."""
    base_lr: float = 0.001
    lr_drop_factor: float = 0.1
    lr_drop_fraction: float = 0.6   # of each phase's iterations at base_lr
    momentum: float = 0.9
    weight_decay: float = 0.0005
    phase_iters: tuple = (2000, 2000, 1000, 1000)
    rpn_batch: int = 256
    roi_batch: int = 128            # R rois per image
    images_per_iter: int = 1        # N
    roi_fg_fraction: float = 0.25
    roi_fg_iou: float = 0.5
    hflip: bool = True
    five_crop: bool = False
    crop_size: int = 600
    crop_retention: float = 0.5
    append_gt_proposals: bool = True
    short_side: int = 600
    max_side: int = 1000

    def __post_init__(self):
        if self.images_per_iter != 1:
            raise ConfigError(
                "images_per_iter must be 1: gradient accumulation across "
                "images is not implemented")
        if len(self.phase_iters) != 4 or any(n < 1 for n in self.phase_iters):
            raise ConfigError(
                f"phase_iters needs 4 positive counts, got {self.phase_iters}")
        if not 0.0 < self.lr_drop_fraction <= 1.0:
            raise ConfigError(
                f"lr_drop_fraction must be in (0, 1], got {self.lr_drop_fraction}")
        if self.rpn_batch % 2 or self.rpn_batch < 2:
            raise ConfigError(f"rpn_batch must be a positive even count, got {self.rpn_batch}")
        if self.roi_batch < 4:
            raise ConfigError(f"roi_batch must be >= 4, got {self.roi_batch}")
        if self.short_side > self.max_side:
            raise ConfigError(
                f"short_side {self.short_side} exceeds max_side {self.max_side}")
        if not 0.0 < self.crop_retention <= 1.0:
            raise ConfigError(
                f"crop_retention must be in (0, 1], got {self.crop_retention}")


@dataclass(frozen=True)
class InferencePlan:
    score_floor: float = 0.05
    class_nms_iou: float = 0.3
    max_detections: int = 100
    eval_iou: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.score_floor < 1.0:
            raise ConfigError(f"score_floor must be in [0, 1), got {self.score_floor}")
        if self.max_detections < 1:
            raise ConfigError(f"max_detections must be positive, got {self.max_detections}")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = ModelConfig()
    anchors: AnchorGridConfig = AnchorGridConfig()
    loss: LossConfig = LossConfig()
    proposals_train: ProposalConfig = ProposalConfig()
    proposals_test: ProposalConfig = ProposalConfig()
    train: TrainPlan = TrainPlan()
    infer: InferencePlan = InferencePlan()
    synthetic: SyntheticConfig = SyntheticConfig()

    def __post_init__(self):
        if self.model.k != self.anchors.k:
            raise ConfigError(
                f"model expects k={self.model.k} anchors per location but the "
                f"anchor grid defines k={self.anchors.k}")


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        ftype = known[name].type
        target = ftype if isinstance(ftype, type) else None
        if target is not None and dataclasses.is_dataclass(target):
            kwargs[name] = _build(target, value, f"{path}.{name}")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from e


def config_from_dict(data) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "config")


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def plain(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: plain(getattr(obj, f.name))
                    for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return [plain(v) for v in obj]
        return obj
    return plain(cfg)


def canonical_json(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return config_from_dict(data)
