"""Axis-aligned box arithmetic: IoU, delta encoding, clipping, flips.

Boxes are corner-format (x1, y1, x2, y2) in continuous pixel coordinates
with strictly positive width and height. Scalar helpers work on `Box`
values; the `*_batch` variants operate on (N, 4) float arrays and are what
the anchor and proposal machinery call in bulk. Everything here is a pure
function on immutable values.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

# exp() is clamped here during decode so untrained regression heads cannot
# overflow box sizes
DELTA_CLAMP = 20.0


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ContractError(
                f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def area(self):
        return self.width * self.height

    @property
    def center(self):
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_array(self):
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @staticmethod
    def from_array(arr):
        return Box(float(arr[0]), float(arr[1]), float(arr[2]), float(arr[3]))


@dataclass(frozen=True)
class BoxDelta:
    """4-parameter regression encoding: center offsets normalized by the
    anchor size, log-space width/height ratios."""
    tx: float
    ty: float
    tw: float
    th: float

    def as_array(self):
        return np.array([self.tx, self.ty, self.tw, self.th], dtype=np.float64)

    @staticmethod
    def from_array(arr):
        return BoxDelta(float(arr[0]), float(arr[1]), float(arr[2]), float(arr[3]))


def _validate_batch(arr, what):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ContractError(f"{what}: expected (N, 4) boxes, got {arr.shape}")
    if arr.size and not ((arr[:, 2] > arr[:, 0]).all() and (arr[:, 3] > arr[:, 1]).all()):
        raise ContractError(f"{what}: degenerate box in batch")
    return arr


def iou(a: Box, b: Box) -> float:
    """Intersection-over-union of two boxes; 0 when disjoint."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(boxes_a, boxes_b):
    """Pairwise IoU, shape (len(a), len(b))."""
    a = _validate_batch(boxes_a, "iou_matrix a")
    b = _validate_batch(boxes_b, "iou_matrix b")
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def encode(anchor: Box, target: Box) -> BoxDelta:
    """Regression target that maps `anchor` onto `target`."""
    acx, acy = anchor.center
    tcx, tcy = target.center
    return BoxDelta(
        (tcx - acx) / anchor.width,
        (tcy - acy) / anchor.height,
        float(np.log(target.width / anchor.width)),
        float(np.log(target.height / anchor.height)),
    )


def decode(anchor: Box, delta: BoxDelta):
    """Apply a delta to an anchor.

    Returns (box, clamped): `clamped` is True when |tw| or |th| exceeded the
    overflow guard and was clipped to +/-DELTA_CLAMP.
    """
    boxes, clamped = decode_batch(anchor.as_array()[None, :], delta.as_array()[None, :])
    return Box.from_array(boxes[0]), bool(clamped[0])


def encode_batch(anchors, targets):
    a = _validate_batch(anchors, "encode anchors")
    t = _validate_batch(targets, "encode targets")
    aw = a[:, 2] - a[:, 0]
    ah = a[:, 3] - a[:, 1]
    tw = t[:, 2] - t[:, 0]
    th = t[:, 3] - t[:, 1]
    out = np.empty_like(a)
    out[:, 0] = ((t[:, 0] + t[:, 2]) - (a[:, 0] + a[:, 2])) * 0.5 / aw
    out[:, 1] = ((t[:, 1] + t[:, 3]) - (a[:, 1] + a[:, 3])) * 0.5 / ah
    out[:, 2] = np.log(tw / aw)
    out[:, 3] = np.log(th / ah)
    return out


def decode_batch(anchors, deltas):
    """Inverse of encode_batch; returns (boxes, clamped_mask)."""
    a = _validate_batch(anchors, "decode anchors")
    d = np.asarray(deltas, dtype=np.float64)
    if d.shape != a.shape:
        raise ContractError(f"decode: {a.shape} anchors vs {d.shape} deltas")
    clamped = np.abs(d[:, 2:4]) > DELTA_CLAMP
    sizes = np.clip(d[:, 2:4], -DELTA_CLAMP, DELTA_CLAMP)
    aw = a[:, 2] - a[:, 0]
    ah = a[:, 3] - a[:, 1]
    cx = (a[:, 0] + a[:, 2]) * 0.5 + d[:, 0] * aw
    cy = (a[:, 1] + a[:, 3]) * 0.5 + d[:, 1] * ah
    w = aw * np.exp(sizes[:, 0])
    h = ah * np.exp(sizes[:, 1])
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    return out, clamped.any(axis=1)


def clip_to_image(b: Box, width, height):
    """Clamp a box to [0, width] x [0, height]; None when nothing remains."""
    if width <= 0 or height <= 0:
        raise ContractError(f"image extents must be positive, got {width}x{height}")
    x1 = min(max(b.x1, 0.0), float(width))
    y1 = min(max(b.y1, 0.0), float(height))
    x2 = min(max(b.x2, 0.0), float(width))
    y2 = min(max(b.y2, 0.0), float(height))
    if x2 <= x1 or y2 <= y1:
        return None
    return Box(x1, y1, x2, y2)


def clip_batch(boxes, width, height):
    """Clamp (N, 4) boxes; returns (clipped, degenerate_mask). Degenerate rows
    keep their clamped coordinates and must be filtered by the caller."""
    arr = np.asarray(boxes, dtype=np.float64).copy()
    arr[:, 0::2] = np.clip(arr[:, 0::2], 0.0, float(width))
    arr[:, 1::2] = np.clip(arr[:, 1::2], 0.0, float(height))
    degenerate = (arr[:, 2] <= arr[:, 0]) | (arr[:, 3] <= arr[:, 1])
    return arr, degenerate


def flip_horizontal(b: Box, width) -> Box:
    """Mirror a box across the vertical centerline of a width-wide image."""
    return Box(width - b.x2, b.y1, width - b.x1, b.y2)


def flip_batch(boxes, width):
    arr = np.asarray(boxes, dtype=np.float64).copy()
    x1 = width - arr[:, 2].copy()
    arr[:, 2] = width - arr[:, 0]
    arr[:, 0] = x1
    return arr
