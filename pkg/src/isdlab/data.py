"""Synthetic shapes detection dataset and VOC-style XML annotations."""
from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .detector import Annotation, ConfigError

SYNTHETIC_CLASSES = ("ellipse", "rectangle", "triangle")
SPLITS = ("labeled", "unlabeled", "eval")


@dataclass
class SyntheticSpec:
    image_size: int = 96
    classes: tuple[str, ...] = SYNTHETIC_CLASSES
    # base RGB per class; jittered per object
    colors: tuple[tuple[float, float, float], ...] = ((0.85, 0.25, 0.2), (0.2, 0.75, 0.3), (0.25, 0.35, 0.9))
    color_jitter: float = 0.15
    objects_per_image: tuple[int, int] = (1, 3)
    size_range: tuple[float, float] = (0.18, 0.45)
    aspect_range: tuple[float, float] = (0.6, 1.6)
    background: str = "mixed"  # noise | gradient | mixed
    noise_std: float = 0.06
    distractors: tuple[int, int] = (0, 2)
    seed: int = 0

    def __post_init__(self):
        self.classes = tuple(self.classes)
        self.colors = tuple(tuple(float(v) for v in c) for c in self.colors)
        self.objects_per_image = tuple(int(v) for v in self.objects_per_image)
        self.size_range = tuple(float(v) for v in self.size_range)
        self.aspect_range = tuple(float(v) for v in self.aspect_range)
        self.distractors = tuple(int(v) for v in self.distractors)
        if len(self.colors) != len(self.classes):
            raise ConfigError("need one colour per class")
        if not set(self.classes) <= set(SYNTHETIC_CLASSES):
            raise ConfigError(f"unknown shape in {self.classes}")
        lo, hi = self.objects_per_image
        if not 1 <= lo <= hi:
            raise ConfigError("objects_per_image must satisfy 1 <= min <= max")
        if not 0 < self.size_range[0] <= self.size_range[1] < 1:
            raise ConfigError("size_range must lie in (0, 1)")
        if self.background not in ("noise", "gradient", "mixed"):
            raise ConfigError(f"unknown background {self.background!r}")

    @property
    def num_classes(self) -> int:
        return len(self.classes)


@dataclass
class SplitManifest:
    labeled: list[str] = field(default_factory=list)
    unlabeled: list[str] = field(default_factory=list)
    eval: list[str] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for name in SPLITS:
            ids = getattr(self, name)
            if seen & set(ids):
                raise ValueError(f"split {name!r} overlaps another split")
            seen |= set(ids)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _shape_mask(kind: str, x0: int, y0: int, w: int, h: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if kind == "rectangle":
        return (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
    if kind == "ellipse":
        return ((xx - (x0 + w / 2)) / (w / 2)) ** 2 + ((yy - (y0 + h / 2)) / (h / 2)) ** 2 <= 1.0
    # isosceles triangle, apex on top
    apex_x, base_y = x0 + w / 2, y0 + h
    frac = (yy - y0) / h
    return (yy >= y0) & (yy <= base_y) & (np.abs(xx - apex_x) <= frac * w / 2)


def _upsample_bilinear(coarse: np.ndarray, n: int) -> np.ndarray:
    """Resize an ``(h, w, c)`` grid to ``(n, n, c)`` with corner-aligned bilinear interpolation."""
    h, w = coarse.shape[:2]
    ys, xs = np.linspace(0, h - 1, n), np.linspace(0, w - 1, n)
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    fy, fx = (ys - y0)[:, None, None], (xs - x0)[None, :, None]
    rows = coarse[y0] * (1 - fy) + coarse[y1] * fy
    return rows[:, x0] * (1 - fx) + rows[:, x1] * fx


def _background(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.image_size
    kind = spec.background
    if kind == "mixed":
        kind = "noise" if rng.random() < 0.5 else "gradient"
    if kind == "noise":
        img = np.broadcast_to(rng.uniform(0.2, 0.8, 3), (n, n, 3)).copy()
        # low-frequency blotches, smoothly interpolated so their edges do not look like shapes
        coarse = rng.normal(0, 0.12, (-(-n // 8) + 1, -(-n // 8) + 1, 3))
        img += _upsample_bilinear(coarse, n)
    else:
        c0, c1 = rng.uniform(0.1, 0.9, (2, 3))
        theta = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:n, 0:n] / n
        t = (np.cos(theta) * xx + np.sin(theta) * yy)
        t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
        img = c0 + (c1 - c0) * t[..., None]
    return img


def render(spec: SyntheticSpec, index: int):
    """Draw image ``index``; returns ``(uint8 image, Annotation, per-object masks)``.

    The generator is seeded from ``(spec.seed, index)`` so images can be
    produced independently and in any order.
    """
    rng = np.random.default_rng([spec.seed, index])
    n = spec.image_size
    for _ in range(50):
        img = _background(spec, rng)
        for _ in range(rng.integers(spec.distractors[0], spec.distractors[1] + 1)):
            r = int(rng.integers(2, max(3, int(0.08 * n))))
            cy, cx = rng.integers(r, n - r, 2)
            yy, xx = np.ogrid[0:n, 0:n]
            blob = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            img[blob] = rng.uniform(0, 1, 3)

        placed = _place_objects(spec, rng)
        if placed is None:
            continue
        labels, boxes, masks = [], [], []
        for cls_id, kind, (x0, y0, w, h) in placed:
            mask = _shape_mask(kind, x0, y0, w, h, n)
            color = np.clip(np.asarray(spec.colors[cls_id - 1]) + rng.uniform(-1, 1, 3) * spec.color_jitter, 0, 1)
            shade = 1.0 + rng.normal(0, 0.05, (n, n, 1))
            img = np.where(mask[..., None], color * shade, img)
            rows, cols = np.nonzero(mask)
            boxes.append((cols.min() / n, rows.min() / n, (cols.max() + 1) / n, (rows.max() + 1) / n))
            labels.append(cls_id)
            masks.append(mask)
        img = img + rng.normal(0, spec.noise_std, img.shape)
        img = (np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8)
        return img, Annotation(labels, boxes), masks
    raise RuntimeError(f"could not place objects for image {index}")


def _place_objects(spec: SyntheticSpec, rng: np.random.Generator):
    n = spec.image_size
    count = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))
    placed, occupied = [], []
    for _ in range(count):
        cls_id = int(rng.integers(1, spec.num_classes + 1))
        kind = spec.classes[cls_id - 1]
        for _ in range(100):
            side = rng.uniform(*spec.size_range) * n
            aspect = rng.uniform(*spec.aspect_range)
            w = int(round(min(side * np.sqrt(aspect), n - 2)))
            h = int(round(min(side / np.sqrt(aspect), n - 2)))
            w, h = max(w, 4), max(h, 4)
            x0 = int(rng.integers(1, n - w))
            y0 = int(rng.integers(1, n - h))
            # boxes may not touch, so every drawn shape stays fully visible
            if all(x0 + w + 1 <= a or a2 + 1 <= x0 or y0 + h + 1 <= b or b2 + 1 <= y0
                   for a, b, a2, b2 in occupied):
                occupied.append((x0, y0, x0 + w, y0 + h))
                placed.append((cls_id, kind, (x0, y0, w, h)))
                break
        else:
            return None
    return placed


def generate(spec: SyntheticSpec, n: int, start: int = 0):
    """Return ``n`` ``(image, Annotation)`` pairs for indices ``start .. start+n-1``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return [render(spec, i)[:2] for i in range(start, start + n)]


# ---------------------------------------------------------------------------
# VOC XML
# ---------------------------------------------------------------------------


class VocParseError(ValueError):
    pass


def write_voc_xml(path, filename: str, width: int, height: int, annotation: Annotation,
                  class_names: Sequence[str]) -> None:
    """Write pixel boxes using VOC's 1-based inclusive convention."""
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = filename
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(width)
    ET.SubElement(size, "height").text = str(height)
    ET.SubElement(size, "depth").text = "3"
    for label, box, diff in zip(annotation.labels, annotation.boxes, annotation.difficult):
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = class_names[label - 1]
        ET.SubElement(obj, "difficult").text = str(int(diff))
        bb = ET.SubElement(obj, "bndbox")
        xmin, ymin = int(round(box[0] * width)) + 1, int(round(box[1] * height)) + 1
        xmax, ymax = int(round(box[2] * width)), int(round(box[3] * height))
        for tag, v in zip(("xmin", "ymin", "xmax", "ymax"), (xmin, ymin, xmax, ymax)):
            ET.SubElement(bb, tag).text = str(v)
    ET.indent(root)
    ET.ElementTree(root).write(path, encoding="unicode")


def _required(node, tag: str, where: str) -> ET.Element:
    child = node.find(tag)
    if child is None or (len(child) == 0 and not (child.text or "").strip()):
        raise VocParseError(f"missing <{tag}> in {where}")
    return child


def _number(node, tag: str, where: str) -> float:
    text = _required(node, tag, where).text
    try:
        return float(text)
    except (TypeError, ValueError):
        raise VocParseError(f"<{tag}> in {where} is not a number: {text!r}") from None


def read_voc_xml(path, class_names: Sequence[str] = SYNTHETIC_CLASSES):
    """Parse a VOC annotation file into ``(Annotation, image filename)``.

    Pixel boxes ``xmin..xmax`` (1-based, inclusive) map to
    ``((xmin - 1) / W, (ymin - 1) / H, xmax / W, ymax / H)``. ``difficult``
    objects are kept but flagged.
    """
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as exc:
        raise VocParseError(f"malformed XML in {path}: {exc}") from None
    size = _required(root, "size", "<annotation>")
    width = _number(size, "width", "<size>")
    height = _number(size, "height", "<size>")
    if width <= 0 or height <= 0:
        raise VocParseError(f"non-positive image size in {path}")
    filename_node = root.find("filename")
    filename = filename_node.text.strip() if filename_node is not None and filename_node.text else None

    labels, boxes, difficult = [], [], []
    for i, obj in enumerate(root.findall("object")):
        where = f"<object> #{i}"
        name = _required(obj, "name", where).text.strip()
        if name not in class_names:
            raise VocParseError(f"unknown class {name!r} in {where}")
        bb = _required(obj, "bndbox", where)
        xmin, ymin, xmax, ymax = (_number(bb, t, f"<bndbox> of {where}") for t in ("xmin", "ymin", "xmax", "ymax"))
        box = (np.clip((xmin - 1) / width, 0, 1), np.clip((ymin - 1) / height, 0, 1),
               np.clip(xmax / width, 0, 1), np.clip(ymax / height, 0, 1))
        if not (box[0] < box[2] and box[1] < box[3]):
            raise VocParseError(f"degenerate box in {where}")
        diff = obj.find("difficult")
        labels.append(class_names.index(name) + 1)
        boxes.append(box)
        difficult.append(diff is not None and (diff.text or "0").strip() == "1")
    return Annotation(labels, boxes, difficult), filename


# ---------------------------------------------------------------------------
# On-disk dataset
# ---------------------------------------------------------------------------


def write_dataset(root, spec: SyntheticSpec, n_labeled: int = 200, n_unlabeled: int = 2000,
                  n_eval: int = 500, force: bool = False) -> SplitManifest:
    """Render the three splits as PNG + XML plus ``manifest.json`` and ``dataset.json``."""
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not force:
        raise FileExistsError(f"{root} is not empty (use force to overwrite)")
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    counts = {"labeled": n_labeled, "unlabeled": n_unlabeled, "eval": n_eval}
    manifest, i = {}, 0
    for split in SPLITS:
        ids = []
        for _ in range(counts[split]):
            img, ann, _ = render(spec, i)
            ident = f"{i:06d}"
            Image.fromarray(img).save(root / "images" / f"{ident}.png")
            write_voc_xml(root / "annotations" / f"{ident}.xml", f"{ident}.png",
                          spec.image_size, spec.image_size, ann, spec.classes)
            ids.append(ident)
            i += 1
        manifest[split] = ids
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    (root / "dataset.json").write_text(json.dumps(asdict(spec), indent=1))
    return SplitManifest(**manifest)


def read_manifest(root) -> SplitManifest:
    return SplitManifest(**json.loads((Path(root) / "manifest.json").read_text()))


def read_spec(root) -> SyntheticSpec:
    return SyntheticSpec(**json.loads((Path(root) / "dataset.json").read_text()))


def load_split(root, split: str, class_names: Sequence[str] | None = None):
    """Load ``(ids, uint8 images (N, H, W, 3), annotations)`` for one split."""
    root = Path(root)
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    if class_names is None:
        class_names = read_spec(root).classes
    ids = getattr(read_manifest(root), split)
    images, anns = [], []
    for ident in ids:
        ann, filename = read_voc_xml(root / "annotations" / f"{ident}.xml", class_names)
        with Image.open(root / "images" / (filename or f"{ident}.png")) as im:
            images.append(np.asarray(im.convert("RGB")))
        anns.append(ann)
    images = np.stack(images) if images else np.zeros((0, 0, 0, 3), dtype=np.uint8)
    return ids, images, anns
