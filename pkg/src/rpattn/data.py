"""Synthetic captioned-shapes corpus and COCO-style annotation I/O.

A scene is one or two object groups, each ``count color shape``; a two-group
caption joins them with a spatial relation ("left of", "above", ...) or
"and". The relation decides where each group may be placed, so captions
carry layout information for the box predictor. Every object gets its own
tight pixel-aligned box.

On disk a dataset is ``images/NNNN.png`` plus ``annotations.json`` with
``images``, ``annotations`` (pixel ``bbox: [x, y, w, h]``) and ``captions``.
"""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, IngestionError
from .images import from_uint8, load_png, save_png, to_uint8
from .imgenc import BoxSet

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 170, 60),
    "blue": (40, 80, 220),
    "yellow": (235, 215, 40),
    "purple": (150, 60, 190),
    "orange": (245, 140, 30),
}
SHAPES = ("square", "circle", "triangle", "diamond")
PLURALS = {s: s + "s" for s in SHAPES}
COUNTS = {"a": 1, "two": 2, "three": 3}
RELATIONS = ("left of", "right of", "above", "below", "next to", "on top of")
BACKGROUND = (128, 128, 128)


@dataclass
class SynthConfig:
    size: int = 64
    k_max: int = 4
    supersample: int = 4
    two_group_fraction: float = 0.7
    relation_fraction: float = 0.7
    min_side: int = 10
    max_side: int = 26


@dataclass
class Sample:
    image: np.ndarray            # (3, H, W) float32 in [-1, 1]
    caption: str
    boxes: BoxSet
    class_labels: list           # shape name per valid box, caption order
    colors: list = field(default_factory=list)

    @property
    def largest_class(self):
        """(color, shape) of the largest box; '' when the colors are unknown."""
        i = int(np.argmax(self.boxes.areas()))
        return (self.colors[i] if self.colors else "", self.class_labels[i])


@dataclass
class Dataset:
    samples: list
    size: int = 64
    k_max: int = 4

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def captions(self):
        return [s.caption for s in self.samples]

    def images(self, idx=None):
        idx = range(len(self.samples)) if idx is None else idx
        return np.stack([self.samples[i].image for i in idx]).astype(np.float32)

    def boxes(self, idx=None):
        idx = range(len(self.samples)) if idx is None else idx
        return (np.stack([self.samples[i].boxes.boxes for i in idx]),
                np.stack([self.samples[i].boxes.valid for i in idx]))

    def subset(self, idx):
        return Dataset([self.samples[i] for i in idx], self.size, self.k_max)


# -- scene grammar --

def _group_phrase(count_word, color, shape):
    noun = shape if COUNTS[count_word] == 1 else PLURALS[shape]
    return f"{count_word} {color} {noun}"


def _regions(relation):
    """Allowed placement rectangles (x0, y0, x1, y1) in unit coords for group 1 and group 2."""
    full = (0.0, 0.0, 1.0, 1.0)
    left, right = (0.0, 0.0, 0.5, 1.0), (0.5, 0.0, 1.0, 1.0)
    top, bottom = (0.0, 0.0, 1.0, 0.5), (0.0, 0.5, 1.0, 1.0)
    return {
        None: (full, full),
        "and": (full, full),
        "left of": (left, right),
        "right of": (right, left),
        "above": (top, bottom),
        "below": (bottom, top),
        "next to": (left, right),
        "on top of": ((0.15, 0.0, 0.85, 0.5), (0.15, 0.5, 0.85, 1.0)),
    }[relation]


def _draw_scene(rng, cfg):
    two = rng.random() < cfg.two_group_fraction
    counts = list(COUNTS)
    groups = []
    used = 0
    for g in range(2 if two else 1):
        room = cfg.k_max - used - (1 if (two and g == 0) else 0)
        options = [c for c in counts if COUNTS[c] <= room]
        word = options[rng.integers(len(options))]
        color = list(COLORS)[rng.integers(len(COLORS))]
        shape = SHAPES[rng.integers(len(SHAPES))]
        if groups and (color, shape) == groups[0][1:]:
            color = list(COLORS)[(list(COLORS).index(color) + 1 + rng.integers(len(COLORS) - 1)) % len(COLORS)]
        groups.append((word, color, shape))
        used += COUNTS[word]
    relation = None
    if two:
        relation = RELATIONS[rng.integers(len(RELATIONS))] if rng.random() < cfg.relation_fraction else "and"
    return groups, relation


def _place(rng, region, n, cfg, taken):
    """n pixel boxes inside ``region`` avoiding overlap with ``taken``; returns list of (x, y, w, h)."""
    s = cfg.size
    x0, y0, x1, y1 = (int(round(v * s)) for v in region)
    out = []
    side_cap = min(cfg.max_side, (x1 - x0), (y1 - y0))
    for k in range(n):
        for attempt in range(200):
            cap = max(cfg.min_side, side_cap - (n - 1) * 5 - attempt // 40 * 3)
            w = int(rng.integers(cfg.min_side, cap + 1))
            h = int(np.clip(w + rng.integers(-3, 4), cfg.min_side, cap))
            if x1 - x0 < w or y1 - y0 < h:
                continue
            x = int(rng.integers(x0, x1 - w + 1))
            y = int(rng.integers(y0, y1 - h + 1))
            if all(x + w <= a or a + c <= x or y + h <= b or b + d <= y for a, b, c, d in taken + out):
                out.append((x, y, w, h))
                break
        else:
            raise ContractError("could not place objects without overlap")
    return out


def _coverage(shape, box, grid):
    """Boolean coverage of ``shape`` inside pixel box on supersampled coordinates."""
    gx, gy = grid
    x, y, w, h = box
    u = (gx - x) / w
    v = (gy - y) / h
    inside = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    if shape == "square":
        return inside
    if shape == "circle":
        return (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    if shape == "triangle":
        return inside & (np.abs(u - 0.5) <= v / 2)
    if shape == "diamond":
        return np.abs(u - 0.5) + np.abs(v - 0.5) <= 0.5
    raise ValueError(f"unknown shape {shape!r}")


def render(objects, cfg):
    """objects: list of (shape, color, pixel box). Returns (3, H, W) float32 quantized to 8 bits."""
    s, ss = cfg.size, cfg.supersample
    coords = (np.arange(s * ss) + 0.5) / ss
    gx, gy = np.meshgrid(coords, coords)
    canvas = np.empty((s, s, 3), dtype=np.float64)
    canvas[:] = BACKGROUND
    for shape, color, box in objects:
        cov = _coverage(shape, box, (gx, gy)).reshape(s, ss, s, ss).mean(axis=(1, 3))[..., None]
        canvas = canvas * (1 - cov) + np.asarray(COLORS[color], dtype=np.float64) * cov
    pixels = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    return from_uint8(pixels)


def make_sample(rng, cfg):
    groups, relation = _draw_scene(rng, cfg)
    regions = _regions(relation)
    taken, objects, labels, colors = [], [], [], []
    for (word, color, shape), region in zip(groups, regions):
        placed = _place(rng, region, COUNTS[word], cfg, taken)
        taken += placed
        for box in placed:
            objects.append((shape, color, box))
            labels.append(shape)
            colors.append(color)
    caption = _group_phrase(*groups[0])
    if relation is not None:
        caption += f" {relation} " + _group_phrase(*groups[1])
    norm = [tuple(v / cfg.size for v in box) for _, _, box in objects]
    return Sample(render(objects, cfg), caption, BoxSet.from_list(norm, cfg.k_max), labels, colors)


def synth_generate(seed, n, config=None):
    """Deterministic dataset of ``n`` samples; each sample has its own spawned seed."""
    cfg = config or SynthConfig()
    if n <= 0:
        raise ConfigError("dataset size must be positive")
    children = np.random.SeedSequence(seed).spawn(n)
    return Dataset([make_sample(np.random.default_rng(c), cfg) for c in children], cfg.size, cfg.k_max)


# -- disk format --

def save_dataset(dataset, root):
    """Write ``images/NNNN.png`` and ``annotations.json`` under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    images, annotations, captions = [], [], []
    for i, s in enumerate(dataset.samples):
        name = f"images/{i:04d}.png"
        save_png(root / name, s.image)
        h, w = s.image.shape[1:]
        images.append({"id": i, "file_name": name, "width": w, "height": h})
        for k in range(s.boxes.k_max):
            if not s.boxes.valid[k]:
                continue
            x, y, bw, bh = (float(v) for v in s.boxes.boxes[k])
            ann = {"id": len(annotations), "image_id": i, "bbox": [x * w, y * h, bw * w, bh * h],
                   "category": s.class_labels[k]}
            if s.colors:
                ann["color"] = s.colors[k]
            annotations.append(ann)
        captions.append({"image_id": i, "caption": s.caption})
    doc = {"images": images, "annotations": annotations, "captions": captions}
    (root / "annotations.json").write_text(json.dumps(doc, indent=1), encoding="utf-8")
    return root


def _require(cond, message, path, record):
    if not cond:
        raise IngestionError(message, path, record)


def load_annotations(images_dir, annotations_file, size=64, k_max=4):
    """Read a COCO-style dataset; boxes are normalized and at most ``k_max`` (largest) kept.

    ``images_dir`` is the directory that ``file_name`` entries are relative to.
    """
    path = Path(annotations_file)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError) as exc:
        raise IngestionError(f"cannot read annotations: {exc}", path) from exc
    except json.JSONDecodeError as exc:
        raise IngestionError(f"malformed JSON at line {exc.lineno} column {exc.colno}", path) from exc
    _require(isinstance(doc, dict), "top level must be an object", path, None)
    for key in ("images", "annotations", "captions"):
        _require(isinstance(doc.get(key), list), f"missing list '{key}'", path, None)

    images = {}
    for r, rec in enumerate(doc["images"]):
        _require(isinstance(rec, dict) and "id" in rec and "file_name" in rec, "image record needs id and file_name",
                 path, f"images[{r}]")
        images[rec["id"]] = rec
    boxes_by_image = {i: [] for i in images}
    for r, ann in enumerate(doc["annotations"]):
        where = f"annotations[{r}]"
        _require(isinstance(ann, dict) and ann.get("image_id") in images, "annotation references unknown image",
                 path, where)
        bbox = ann.get("bbox")
        _require(isinstance(bbox, list) and len(bbox) == 4 and all(isinstance(v, (int, float)) for v in bbox),
                 "bbox must be [x, y, w, h] numbers", path, where)
        rec = images[ann["image_id"]]
        w, h = rec.get("width"), rec.get("height")
        _require(isinstance(w, (int, float)) and isinstance(h, (int, float)) and w > 0 and h > 0,
                 "image record needs positive width and height", path, where)
        x, y, bw, bh = (float(v) for v in bbox)
        _require(bw > 0 and bh > 0, "bbox has non-positive size", path, where)
        _require(x >= 0 and y >= 0 and x + bw <= w and y + bh <= h, "bbox overflows its image", path, where)
        boxes_by_image[ann["image_id"]].append(((x / w, y / h, bw / w, bh / h), ann.get("category", ""),
                                                 ann.get("color", "")))
    captions = {}
    for r, cap in enumerate(doc["captions"]):
        _require(isinstance(cap, dict) and cap.get("image_id") in images and isinstance(cap.get("caption"), str),
                 "caption record needs image_id and caption text", path, f"captions[{r}]")
        captions.setdefault(cap["image_id"], cap["caption"])

    if not images:
        warnings.warn(f"{path}: no images; returning an empty dataset", stacklevel=2)
    samples = []
    for image_id, rec in images.items():
        items = boxes_by_image[image_id]
        if len(items) > k_max:
            order = sorted(range(len(items)), key=lambda k: -items[k][0][2] * items[k][0][3])
            keep = set(order[:k_max])
            items = [it for k, it in enumerate(items) if k in keep]
        img_path = Path(images_dir) / rec["file_name"]
        try:
            image = load_png(img_path, size)
        except OSError as exc:
            raise IngestionError(f"cannot read image: {exc}", img_path, f"images id {image_id}") from exc
        colors = [c for _, _, c in items]
        samples.append(Sample(image, captions.get(image_id, ""), BoxSet.from_list([b for b, _, _ in items], k_max),
                              [c for _, c, _ in items], colors if all(colors) else []))
    return Dataset(samples, size, k_max)


def load_dataset(root, size=64, k_max=4):
    root = Path(root)
    return load_annotations(root, root / "annotations.json", size, k_max)


def dataset_fingerprint(dataset):
    """Byte-level digest of images, captions and boxes, for determinism checks."""
    h = hashlib.sha256()
    for s in dataset.samples:
        h.update(to_uint8(s.image).tobytes())
        h.update(s.caption.encode())
        h.update(s.boxes.boxes.tobytes())
    return h.hexdigest()
