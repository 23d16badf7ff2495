"""Procedural power-line scenes with pixel-exact ground truth.

Four visually distinct archetypes stand in for field imagery: disc-chain
insulators (bluish), lattice masts (dark gray), clamp-like fittings
(red-brown), and thin wires (near-black, aspect ratio at least 8:1). Every
object is rendered through an explicit pixel mask and its annotation box is
the exact bounding rectangle of that mask, so box tightness is verifiable
against the renderer itself.

Each image draws from its own seed substream derived from (seed, split,
index), making generation order-independent and bit-reproducible.
"""

from dataclasses import dataclass, replace

import numpy as np

from .boxes import Box
from .data import (AnnotatedImage, Dataset, DEFAULT_CLASS_NAMES,
                   ObjectAnnotation, save_dataset)
from .errors import ConfigError

_SPLIT_IDS = {"train": 0, "test": 1}

# per-class base colors (RGB in [0,1]) before the contrast pull toward the
# background; chosen for separability at toy backbone capacity
_CLASS_COLORS = {
    1: np.array([0.52, 0.60, 0.78]),   # insulator: bluish discs
    2: np.array([0.18, 0.18, 0.20]),   # pole-and-tower: dark lattice
    3: np.array([0.62, 0.30, 0.20]),   # fitting: red-brown blob
    4: np.array([0.05, 0.05, 0.06]),   # wire: near-black line
}


@dataclass(frozen=True)
class SyntheticConfig:
    image_size: int = 600
    train_counts: tuple = (1200, 2000, 1800, 600)   # images per class
    test_counts: tuple = (50, 50, 50, 50)
    clutter_density: float = 0.5
    contrast: float = 0.4          # 0 = objects vanish into background
    min_object_size: int = 16
    max_object_size: int = 64
    max_instances: int = 3
    seed: int = 0

    def __post_init__(self):
        for counts in (self.train_counts, self.test_counts):
            if len(counts) != 4 or any(c < 1 for c in counts):
                raise ConfigError(
                    f"per-class counts need 4 entries >= 1, got {counts}")
        if not 4 <= self.min_object_size <= self.max_object_size:
            raise ConfigError(
                f"object size range [{self.min_object_size}, "
                f"{self.max_object_size}] invalid")
        if self.image_size < 2 * self.max_object_size:
            raise ConfigError(
                f"image size {self.image_size} too small for objects up to "
                f"{self.max_object_size}")
        if not 0.05 <= self.contrast <= 1.0:
            raise ConfigError(f"contrast must be in [0.05, 1], got {self.contrast}")

    def scaled(self, factor):
        """Same recipe with image counts scaled by `factor` (at least 1 each)."""
        scale = lambda counts: tuple(max(1, round(c * factor)) for c in counts)
        return replace(self, train_counts=scale(self.train_counts),
                       test_counts=scale(self.test_counts))


def image_rng(seed, split, index):
    """Independent per-image generator; (seed, split, index) is the identity."""
    ss = np.random.SeedSequence([int(seed), _SPLIT_IDS[split], int(index)])
    return np.random.Generator(np.random.PCG64(ss))


# ---------------------------------------------------------------------------
# mask primitives on small local grids

def _ellipse(h, w, cy, cx, ry, rx):
    yy = np.arange(h)[:, None]
    xx = np.arange(w)[None, :]
    return ((yy - cy) / max(ry, 0.5)) ** 2 + ((xx - cx) / max(rx, 0.5)) ** 2 <= 1.0


def _segment(h, w, y0, x0, y1, x1, thickness):
    yy = np.arange(h)[:, None].astype(np.float64)
    xx = np.arange(w)[None, :].astype(np.float64)
    dy, dx = y1 - y0, x1 - x0
    norm = dy * dy + dx * dx
    if norm == 0.0:
        d2 = (yy - y0) ** 2 + (xx - x0) ** 2
    else:
        t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / norm, 0.0, 1.0)
        d2 = (yy - (y0 + t * dy)) ** 2 + (xx - (x0 + t * dx)) ** 2
    return d2 <= (0.5 * max(thickness, 1.0)) ** 2


def _trim(mask):
    """Crop a local mask to its tight extent (masks are built with slack)."""
    ys, xs = np.nonzero(mask)
    return mask[ys.min():ys.max() + 1, xs.min():xs.max() + 1]


def _insulator_mask(s, rng):
    """Chain of slightly overlapping discs along a near-vertical axis."""
    n = int(rng.integers(3, 7))
    r = max(1.5, s / (1.7 * n))
    tilt = rng.uniform(-0.25, 0.25)
    h = s + int(2 * r) + 2
    w = int(2 * r + abs(tilt) * s) + 4
    mask = np.zeros((h, w), dtype=bool)
    cx0 = w / 2 - tilt * s / 2
    for i in range(n):
        cy = r + i * (s - 2 * r) / max(n - 1, 1)
        cx = cx0 + tilt * cy
        mask |= _ellipse(h, w, cy + 1, cx, r, r * rng.uniform(0.75, 0.95))
    return _trim(mask)


def _tower_mask(s, rng):
    """Trapezoidal lattice: two legs, rungs, and diagonal bracing."""
    top = s * rng.uniform(0.18, 0.3)
    bottom = s * rng.uniform(0.5, 0.7)
    w = int(bottom) + 4
    h = s + 2
    t = max(1.0, s / 24)
    cx = w / 2
    legs = ((cx - top / 2, cx - bottom / 2), (cx + top / 2, cx + bottom / 2))
    mask = np.zeros((h, w), dtype=bool)
    for xt, xb in legs:
        mask |= _segment(h, w, 0, xt, s - 1, xb, t)
    levels = np.linspace(0, s - 1, int(rng.integers(4, 6)))
    for y0, y1 in zip(levels[:-1], levels[1:]):
        xl0 = np.interp(y0, [0, s - 1], [legs[0][0], legs[0][1]])
        xr0 = np.interp(y0, [0, s - 1], [legs[1][0], legs[1][1]])
        xl1 = np.interp(y1, [0, s - 1], [legs[0][0], legs[0][1]])
        xr1 = np.interp(y1, [0, s - 1], [legs[1][0], legs[1][1]])
        mask |= _segment(h, w, y0, xl0, y0, xr0, t)
        mask |= _segment(h, w, y0, xl0, y1, xr1, t)
        mask |= _segment(h, w, y0, xr0, y1, xl1, t)
    return _trim(mask)


def _fitting_mask(s, rng):
    """Compact cluster of overlapping ellipses with a stub."""
    e = max(8, int(s * 0.7))
    mask = np.zeros((e, e), dtype=bool)
    c = e / 2
    for _ in range(int(rng.integers(2, 5))):
        cy = c + rng.uniform(-e / 6, e / 6)
        cx = c + rng.uniform(-e / 6, e / 6)
        mask |= _ellipse(e, e, cy, cx, rng.uniform(e / 6, e / 3.2),
                         rng.uniform(e / 6, e / 3.2))
    ang = rng.uniform(0, 2 * np.pi)
    mask |= _segment(e, e, c, c, c + np.sin(ang) * e / 2.2,
                     c + np.cos(ang) * e / 2.2, max(1.0, e / 8))
    return _trim(mask)


def _wire_mask(s, rng):
    """Thin sagging line, built horizontally; box aspect is at least 8:1.

    The sag amplitude is capped so that (sag + thickness + rounding) never
    exceeds length/8; vertical wires are the transpose.
    """
    length = int(min(s * rng.uniform(1.6, 2.6), 255))
    length = max(length, 8 * 3)
    t = 1 if length < 96 else int(rng.integers(1, 3))
    max_sag = length / 8.0 - t - 1.0
    sag = rng.uniform(0.0, max(max_sag, 0.0))
    xs = np.arange(length)
    ys = np.rint(sag * 4.0 * xs * (length - 1.0 - xs) / (length - 1.0) ** 2).astype(int)
    h = ys.max() + t
    mask = np.zeros((h, length), dtype=bool)
    for dy in range(t):
        mask[ys + dy, xs] = True
    if rng.random() < 0.4:
        mask = mask.T
    return _trim(mask)


_MASK_FNS = {1: _insulator_mask, 2: _tower_mask, 3: _fitting_mask, 4: _wire_mask}


def _background(size, rng):
    base = 0.38 + 0.26 * rng.random(3)
    fy, fx = rng.uniform(0.5, 2.0, 2)
    phase = rng.uniform(0, 2 * np.pi, 2)
    yy = np.linspace(0, 1, size)[:, None]
    xx = np.linspace(0, 1, size)[None, :]
    field = (0.06 * np.sin(2 * np.pi * fy * yy + phase[0])
             + 0.06 * np.sin(2 * np.pi * fx * xx + phase[1]))
    canvas = base[None, None, :] + field[:, :, None]
    canvas += rng.normal(0.0, 0.02, canvas.shape)
    return canvas, base


def _add_clutter(canvas, base, rng, density):
    """Faint distractor strokes and blobs, drawn under the real objects."""
    size = canvas.shape[0]
    n = int(rng.poisson(density * 8))
    for _ in range(n):
        kind = rng.integers(0, 3)
        tint = np.clip(base + rng.uniform(-0.13, 0.13, 3), 0.0, 1.0)
        e = int(rng.integers(6, 28))
        oy = int(rng.integers(0, size - e))
        ox = int(rng.integers(0, size - e))
        if kind == 0:
            m = _ellipse(e, e, e / 2, e / 2, rng.uniform(2, e / 2), rng.uniform(2, e / 2))
        elif kind == 1:
            m = _segment(e, e, rng.uniform(0, e), rng.uniform(0, e),
                         rng.uniform(0, e), rng.uniform(0, e), rng.uniform(1, 2.5))
        else:
            m = rng.random((e, e)) < 0.08
        region = canvas[oy:oy + e, ox:ox + e]
        region[m] = 0.65 * region[m] + 0.35 * tint[None, :]


def _boxes_separated(box, others, margin=2.0):
    for o in others:
        if (box.x1 - margin < o.x2 and o.x1 < box.x2 + margin
                and box.y1 - margin < o.y2 and o.y1 < box.y2 + margin):
            return False
    return True


def render_image(cfg: SyntheticConfig, class_id, rng):
    """One scene of a single class: (raster, annotations, masks).

    Returned masks are full-image booleans, one per annotation, and each
    annotation box equals the tight bounding rectangle of its mask.
    """
    if class_id not in _MASK_FNS:
        raise ConfigError(f"unknown class id {class_id}")
    size = cfg.image_size
    canvas, base = _background(size, rng)
    _add_clutter(canvas, base, rng, cfg.clutter_density)

    annotations, masks = [], []
    n_instances = int(rng.integers(1, cfg.max_instances + 1))
    placed_boxes = []
    for _ in range(n_instances):
        for _attempt in range(40):
            s = int(rng.integers(cfg.min_object_size, cfg.max_object_size + 1))
            local = _MASK_FNS[class_id](s, rng)
            lh, lw = local.shape
            if lh > size - 4 or lw > size - 4:
                continue
            oy = int(rng.integers(2, size - lh - 1))
            ox = int(rng.integers(2, size - lw - 1))
            ys, xs = np.nonzero(local)
            box = Box(float(ox + xs.min()), float(oy + ys.min()),
                      float(ox + xs.max() + 1), float(oy + ys.max() + 1))
            if not _boxes_separated(box, placed_boxes):
                continue
            color = _CLASS_COLORS[class_id] + rng.uniform(-0.04, 0.04, 3)
            strength = np.clip(cfg.contrast + rng.uniform(0.0, 0.25), 0.0, 1.0)
            paint = base * (1.0 - strength) + color * strength
            full = np.zeros((size, size), dtype=bool)
            full[oy:oy + lh, ox:ox + lw] = local
            canvas[full] = paint[None, :] + rng.normal(0.0, 0.015, (int(full.sum()), 3))
            placed_boxes.append(box)
            annotations.append(ObjectAnnotation(class_id, box))
            masks.append(full)
            break
    raster = np.clip(np.rint(np.clip(canvas, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    return raster, annotations, masks


def generate_synthetic_dataset(cfg: SyntheticConfig, out_dir):
    """Render the full dataset to disk; returns (dataset, manifest path)."""
    splits = {}
    for split, counts in (("train", cfg.train_counts), ("test", cfg.test_counts)):
        images = []
        index = 0
        for class_idx, count in enumerate(counts):
            class_id = class_idx + 1
            name = DEFAULT_CLASS_NAMES[class_id]
            for _ in range(count):
                rng = image_rng(cfg.seed, split, index)
                raster, annos, _ = render_image(cfg, class_id, rng)
                image_id = f"images/{split}/{name}_{index:05d}.png"
                images.append(AnnotatedImage(
                    image_id, cfg.image_size, cfg.image_size, tuple(annos),
                    path=None, _raster=raster))
                index += 1
        splits[split] = images
    dataset = Dataset(dict(DEFAULT_CLASS_NAMES), splits["train"], splits["test"])
    manifest = save_dataset(dataset, out_dir, write_images=True)
    dataset.root = manifest.parent
    for img in dataset.train + dataset.test:
        img.path = dataset.root / img.image_id
    return dataset, manifest
