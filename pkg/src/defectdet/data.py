"""Dataset records, annotation I/O, the resize policy, and augmentation.

On-disk layout: a manifest JSON naming the class table and one JSON-lines
annotation file per split; every line is one image record with its boxes.
Rasters are PNG. All paths inside the files are relative to the manifest's
directory, so a dataset directory moves as a unit.
"""

import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ._fsio import atomic_write_bytes, atomic_write_text
from .boxes import Box, flip_batch
from .errors import ConfigError, ContractError, DatasetError

log = logging.getLogger(__name__)

DEFAULT_CLASS_NAMES = {1: "insulator", 2: "pole-and-tower", 3: "fitting", 4: "wire"}


@dataclass(frozen=True)
class ObjectAnnotation:
    class_id: int
    box: Box


@dataclass
class AnnotatedImage:
    """One image with its ground-truth objects; the raster loads lazily."""
    image_id: str
    width: int
    height: int
    objects: tuple
    path: Path = None
    _raster: np.ndarray = field(default=None, repr=False)

    def raster(self):
        """(H, W, 3) uint8 pixels, cached after the first load."""
        if self._raster is None:
            if self.path is None:
                raise DatasetError(f"{self.image_id}: no raster and no backing file")
            with Image.open(self.path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
            if arr.shape[:2] != (self.height, self.width):
                raise DatasetError(
                    f"{self.image_id}: file is {arr.shape[1]}x{arr.shape[0]}, "
                    f"annotation says {self.width}x{self.height}")
            self._raster = arr
        return self._raster

    def gt_boxes(self):
        """(N, 4) ground-truth array; empty for negative images."""
        if not self.objects:
            return np.empty((0, 4))
        return np.stack([o.box.as_array() for o in self.objects])

    def gt_classes(self):
        return np.array([o.class_id for o in self.objects], dtype=np.intp)


@dataclass
class Dataset:
    classes: dict           # id -> name, ids dense from 1
    train: list
    test: list
    root: Path = None

    def split(self, name):
        if name not in ("train", "test"):
            raise ConfigError(f"unknown split {name!r}")
        return self.train if name == "train" else self.test

    @property
    def n_classes(self):
        return len(self.classes)


def raster_to_input(arr):
    """(H, W, 3) uint8 -> (3, H, W) float64 in [-0.5, 0.5]."""
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ContractError(f"expected (H, W, 3) uint8 raster, got {arr.shape} {arr.dtype}")
    return np.ascontiguousarray(arr.transpose(2, 0, 1), dtype=np.float64) / 255.0 - 0.5


def _validate_classes(table, where):
    ids = sorted(table)
    if not ids or ids != list(range(1, len(ids) + 1)):
        raise DatasetError(
            f"{where}: class ids must be dense from 1 (0 is background), got {ids}")
    return {int(i): str(table[i]) for i in ids}


def _parse_record(obj, classes, base_dir, where):
    problems = []
    image_rel = obj.get("image")
    width, height = obj.get("width"), obj.get("height")
    if not isinstance(image_rel, str) or not image_rel:
        problems.append(f"{where}: missing image path")
    if not (isinstance(width, int) and isinstance(height, int) and width > 0 and height > 0):
        problems.append(f"{where}: invalid extents {width}x{height}")
    if problems:
        return None, problems
    path = (base_dir / image_rel) if base_dir is not None else None
    if path is not None and not path.is_file():
        problems.append(f"{where}: image file not found: {image_rel}")
    annos = []
    for k, o in enumerate(obj.get("objects", [])):
        cid = o.get("class")
        bbox = o.get("bbox")
        if cid not in classes:
            problems.append(f"{where}: object {k}: unknown class {cid!r}")
            continue
        if not (isinstance(bbox, list) and len(bbox) == 4):
            problems.append(f"{where}: object {k}: malformed bbox {bbox!r}")
            continue
        x1, y1, x2, y2 = (float(v) for v in bbox)
        if not (0.0 <= x1 < x2 <= width and 0.0 <= y1 < y2 <= height):
            problems.append(
                f"{where}: object {k}: box {bbox} outside [0,{width}]x[0,{height}] "
                f"or degenerate")
            continue
        annos.append(ObjectAnnotation(int(cid), Box(x1, y1, x2, y2)))
    if problems:
        return None, problems
    return AnnotatedImage(image_rel, width, height, tuple(annos), path=path), []


def _load_split(jsonl_path, classes, base_dir):
    images, problems = [], []
    with open(jsonl_path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{jsonl_path.name}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                problems.append(f"{where}: invalid JSON ({e.msg})")
                continue
            img, errs = _parse_record(obj, classes, base_dir, where)
            if errs:
                problems.extend(errs)
            else:
                images.append(img)
    return images, problems


def load_dataset(manifest_path) -> Dataset:
    """Load and validate a dataset; every offending line is reported at once."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DatasetError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetError(f"{manifest_path}: invalid JSON ({e})") from e
    if "classes" not in manifest or "splits" not in manifest:
        raise DatasetError(f"{manifest_path}: manifest needs 'classes' and 'splits'")
    classes = _validate_classes(
        {int(k): v for k, v in manifest["classes"].items()}, str(manifest_path))
    base = manifest_path.parent
    splits = {}
    problems = []
    for split in ("train", "test"):
        rel = manifest["splits"].get(split)
        if rel is None:
            splits[split] = []
            continue
        ann = base / rel
        if not ann.is_file():
            raise DatasetError(f"{manifest_path}: missing annotation file {rel}")
        splits[split], errs = _load_split(ann, classes, base)
        problems.extend(errs)
    if problems:
        raise DatasetError(
            f"{len(problems)} invalid record(s):\n" + "\n".join(problems))
    return Dataset(classes, splits["train"], splits["test"], root=base)


def _record_line(img: AnnotatedImage):
    return json.dumps({
        "image": img.image_id,
        "width": img.width,
        "height": img.height,
        "objects": [{"class": o.class_id,
                     "bbox": [o.box.x1, o.box.y1, o.box.x2, o.box.y2]}
                    for o in img.objects],
    })


def png_bytes(arr):
    """Encode an (H, W, 3) uint8 raster as PNG bytes."""
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def save_dataset(dataset: Dataset, out_dir, write_images=True):
    """Write manifest, per-split annotations, and (optionally) PNG rasters."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts = {}
    for split in ("train", "test"):
        images = dataset.split(split)
        lines = [_record_line(img) for img in images]
        atomic_write_text(out / f"{split}.jsonl", "\n".join(lines) + ("\n" if lines else ""))
        per_class = {name: 0 for name in dataset.classes.values()}
        for img in images:
            for o in img.objects:
                per_class[dataset.classes[o.class_id]] += 1
        counts[split] = {"images": len(images), "objects": per_class}
        if write_images:
            for img in images:
                target = out / img.image_id
                target.parent.mkdir(parents=True, exist_ok=True)
                atomic_write_bytes(target, png_bytes(img.raster()))
    manifest = {
        "classes": {str(i): n for i, n in sorted(dataset.classes.items())},
        "splits": {"train": "train.jsonl", "test": "test.jsonl"},
        "counts": counts,
    }
    atomic_write_text(out / "manifest.json",
                      json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out / "manifest.json"


def resize_with_boxes(img: AnnotatedImage, short_side, max_side):
    """Uniformly rescale so the short side reaches short_side, capped so the
    long side never exceeds max_side. Returns (resized image, scale)."""
    if short_side > max_side:
        raise ConfigError(f"short_side {short_side} exceeds max_side {max_side}")
    w, h = img.width, img.height
    s = short_side / min(w, h)
    if s * max(w, h) > max_side:
        s = max_side / max(w, h)
    if s == 1.0:
        return img, 1.0
    nw, nh = max(1, round(w * s)), max(1, round(h * s))
    raster = np.asarray(
        Image.fromarray(img.raster(), mode="RGB").resize((nw, nh), Image.BILINEAR),
        dtype=np.uint8)

    def scaled_box(b):
        # clamp against the rounded extent; the epsilon keeps a sliver box at
        # the far edge from collapsing to zero width after the clamp
        x2 = min(b.x2 * s, float(nw))
        y2 = min(b.y2 * s, float(nh))
        x1 = max(0.0, min(b.x1 * s, x2 - 1e-6))
        y1 = max(0.0, min(b.y1 * s, y2 - 1e-6))
        return Box(x1, y1, x2, y2)

    objects = tuple(ObjectAnnotation(o.class_id, scaled_box(o.box))
                    for o in img.objects)
    resized = AnnotatedImage(img.image_id, nw, nh, objects, path=None, _raster=raster)
    return resized, s


def hflip_augment(img: AnnotatedImage) -> AnnotatedImage:
    """Mirror raster and boxes; meant for on-the-fly use, never stored."""
    raster = np.ascontiguousarray(img.raster()[:, ::-1])
    flipped = flip_batch(img.gt_boxes(), img.width) if img.objects else None
    objects = tuple(
        ObjectAnnotation(o.class_id, Box(*flipped[i]))
        for i, o in enumerate(img.objects))
    return AnnotatedImage(img.image_id, img.width, img.height, objects,
                          path=None, _raster=raster)


def five_crop_augment(img: AnnotatedImage, crop_size=600, retention=0.5):
    """Corner and center crops, keeping boxes with enough area inside.

    A box survives a crop when at least `retention` of its area lies in the
    window; survivors are clipped and shifted into crop coordinates. Crops
    that keep no boxes are discarded, duplicate crop origins collapse, and an
    undersized image yields no crops with a warning.
    """
    w, h = img.width, img.height
    c = crop_size
    if w < c or h < c:
        log.warning("image %s (%dx%d) smaller than crop size %d; no crops",
                    img.image_id, w, h, c)
        return []
    origins = []
    for ox, oy in ((0, 0), (w - c, 0), (0, h - c), (w - c, h - c),
                   ((w - c) // 2, (h - c) // 2)):
        if (ox, oy) not in origins:
            origins.append((ox, oy))
    raster = img.raster()
    crops = []
    for n, (ox, oy) in enumerate(origins):
        kept = []
        for o in img.objects:
            b = o.box
            ix1, iy1 = max(b.x1, ox), max(b.y1, oy)
            ix2, iy2 = min(b.x2, ox + c), min(b.y2, oy + c)
            inter = max(ix2 - ix1, 0.0) * max(iy2 - iy1, 0.0)
            if inter / b.area >= retention:
                kept.append(ObjectAnnotation(
                    o.class_id, Box(ix1 - ox, iy1 - oy, ix2 - ox, iy2 - oy)))
        if kept:
            crops.append(AnnotatedImage(
                f"{img.image_id}#crop{n}", c, c, tuple(kept), path=None,
                _raster=np.ascontiguousarray(raster[oy:oy + c, ox:ox + c])))
    return crops
