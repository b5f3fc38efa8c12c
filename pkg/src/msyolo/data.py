"""Annotation ingestion, dataset statistics, letterboxing, synthetic scenes.

Annotations use the COCO-style JSON schema documented in
``docs/annotations.md``. Images travel as binary PGM (P5) or ``.npy``
grayscale arrays; in memory an image is a float32 (H, W) array in [0, 1].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, UsageError, ValidationError
from .metrics import iou as _box_iou

# the category subset used throughout: common street-scene classes
DEFAULT_CLASSES = ("person", "bike", "car", "motor", "bus", "truck", "light", "hydrant", "sign")

LETTERBOX_FILL = 114.0 / 255.0


@dataclass
class ImageInfo:
    id: int
    file_name: str
    width: int
    height: int


@dataclass
class GroundTruthInstance:
    """One annotated box: (x_min, y_min, width, height) in source pixels."""

    image_id: int
    class_id: int
    box: tuple  # (x, y, w, h)

    @property
    def xyxy(self) -> tuple:
        x, y, w, h = self.box
        return (x, y, x + w, y + h)

    @property
    def area(self) -> float:
        return self.box[2] * self.box[3]


@dataclass
class AnnotationSet:
    images: list[ImageInfo]
    instances: list[GroundTruthInstance]
    categories: dict  # name -> contiguous class id
    flagged_categories: list = field(default_factory=list)

    @property
    def class_names(self) -> list[str]:
        return [name for name, _ in sorted(self.categories.items(), key=lambda kv: kv[1])]

    def image_by_id(self) -> dict:
        return {im.id: im for im in self.images}

    def instances_by_image(self) -> dict:
        out = {im.id: [] for im in self.images}
        for inst in self.instances:
            out[inst.image_id].append(inst)
        return out

    def to_coco_dict(self) -> dict:
        return {
            "images": [
                {"id": im.id, "file_name": im.file_name, "width": im.width, "height": im.height}
                for im in self.images
            ],
            "annotations": [
                {
                    "id": i,
                    "image_id": inst.image_id,
                    "category_id": inst.class_id,
                    "bbox": [float(v) for v in inst.box],
                }
                for i, inst in enumerate(self.instances)
            ],
            "categories": [
                {"id": cid, "name": name}
                for name, cid in sorted(self.categories.items(), key=lambda kv: kv[1])
            ],
        }


def _require(obj: dict, key: str, path: str, where: str):
    if key not in obj:
        raise ParseError(f"{path}: {where} missing key {key!r}")
    return obj[key]


def load_annotations(path: str) -> AnnotationSet:
    """Load a COCO-style annotation file.

    Category ids are remapped to contiguous [0, n) in file order. Boxes are
    clamped to image bounds; instances that end up with non-positive extent
    and annotations referencing unknown images/categories raise a
    validation error listing the offending ids.
    """
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: malformed JSON at offset {exc.pos}: {exc.msg}") from None

    for key in ("images", "annotations", "categories"):
        _require(doc, key, path, "top level")

    categories = {}
    source_to_contiguous = {}
    for entry in doc["categories"]:
        name = _require(entry, "name", path, "category")
        cid = _require(entry, "id", path, "category")
        source_to_contiguous[cid] = len(categories)
        categories[name] = source_to_contiguous[cid]

    images = []
    for entry in doc["images"]:
        images.append(ImageInfo(
            id=_require(entry, "id", path, "image"),
            file_name=_require(entry, "file_name", path, "image"),
            width=int(_require(entry, "width", path, "image")),
            height=int(_require(entry, "height", path, "image")),
        ))
    by_id = {im.id: im for im in images}
    if len(by_id) != len(images):
        raise ValidationError(f"{path}: duplicate image ids")

    instances = []
    dangling_images = []
    dangling_categories = []
    degenerate = []
    for entry in doc["annotations"]:
        img_id = _require(entry, "image_id", path, "annotation")
        cat_id = _require(entry, "category_id", path, "annotation")
        bbox = _require(entry, "bbox", path, "annotation")
        if img_id not in by_id:
            dangling_images.append(img_id)
            continue
        if cat_id not in source_to_contiguous:
            dangling_categories.append(cat_id)
            continue
        im = by_id[img_id]
        x, y, w, h = (float(v) for v in bbox)
        x1 = min(max(x, 0.0), im.width)
        y1 = min(max(y, 0.0), im.height)
        x2 = min(max(x + w, 0.0), im.width)
        y2 = min(max(y + h, 0.0), im.height)
        if x2 - x1 <= 0 or y2 - y1 <= 0:
            degenerate.append(entry.get("id", "?"))
            continue
        instances.append(GroundTruthInstance(
            image_id=img_id,
            class_id=source_to_contiguous[cat_id],
            box=(x1, y1, x2 - x1, y2 - y1),
        ))
    if dangling_images:
        raise ValidationError(
            f"{path}: annotations reference missing image ids {sorted(set(dangling_images))[:10]}")
    if dangling_categories:
        raise ValidationError(
            f"{path}: annotations reference missing category ids {sorted(set(dangling_categories))[:10]}")

    flagged = [name for name in categories if name not in DEFAULT_CLASSES]
    return AnnotationSet(images=images, instances=instances, categories=categories,
                         flagged_categories=flagged)


def filter_categories(annset: AnnotationSet, names) -> AnnotationSet:
    """Keep only instances of the named categories, remapping class ids to
    the order of ``names``. Images are always retained (negatives allowed)."""
    names = list(names)
    if not names:
        raise UsageError("filter_categories needs at least one category name")
    unknown = [n for n in names if n not in annset.categories]
    if unknown:
        raise ValidationError(
            f"unknown categories {unknown}; known: {sorted(annset.categories)}")
    old_to_new = {annset.categories[n]: i for i, n in enumerate(names)}
    instances = [
        GroundTruthInstance(inst.image_id, old_to_new[inst.class_id], inst.box)
        for inst in annset.instances
        if inst.class_id in old_to_new
    ]
    return AnnotationSet(
        images=list(annset.images),
        instances=instances,
        categories={n: i for i, n in enumerate(names)},
        flagged_categories=[],
    )


def images_with_instances(annset: AnnotationSet) -> int:
    return len({inst.image_id for inst in annset.instances})


# -- statistics -------------------------------------------------------------


@dataclass
class SplitRow:
    name: str
    pictures: int
    instances: int
    pictures_pct: float
    instances_pct: float


@dataclass
class StatsTable:
    rows: list[SplitRow]
    class_histogram: dict  # class name -> instance count, across all splits
    per_split_histogram: dict  # split name -> {class name -> count}

    def to_dict(self) -> dict:
        return {
            "splits": [vars(r) for r in self.rows],
            "class_histogram": self.class_histogram,
            "per_split_histogram": self.per_split_histogram,
        }

    def to_text(self) -> str:
        lines = [f"{'Type':<12}{'Pictures':>10}{'Instances':>12}{'Pictures%':>11}{'Instances%':>12}"]
        for r in self.rows:
            lines.append(f"{r.name:<12}{r.pictures:>10}{r.instances:>12}"
                         f"{r.pictures_pct:>10.2f}%{r.instances_pct:>11.2f}%")
        lines.append("")
        lines.append("Class histogram:")
        for name, count in self.class_histogram.items():
            lines.append(f"  {name:<16}{count:>10}")
        return "\n".join(lines)


def dataset_stats(annset: AnnotationSet, splits: dict) -> StatsTable:
    """Per-split picture/instance counts for one annotation set.

    ``splits`` maps split name to an iterable of image ids; every image must
    appear in exactly one split.
    """
    assignment = {}
    for split, ids in splits.items():
        for img_id in ids:
            if img_id in assignment:
                raise ValidationError(
                    f"image id {img_id} is in both {assignment[img_id]!r} and {split!r}")
            assignment[img_id] = split
    missing = [im.id for im in annset.images if im.id not in assignment]
    if missing:
        raise ValidationError(f"images not assigned to any split: {missing[:10]}")
    unknown = [i for i in assignment if i not in annset.image_by_id()]
    if unknown:
        raise ValidationError(f"split references unknown image ids: {unknown[:10]}")
    sets = {
        split: AnnotationSet(
            images=[im for im in annset.images if assignment[im.id] == split],
            instances=[inst for inst in annset.instances if assignment[inst.image_id] == split],
            categories=annset.categories,
        )
        for split in splits
    }
    return stats_from_sets(sets)


def stats_from_sets(sets: dict) -> StatsTable:
    """Statistics when each split is its own annotation set (file-per-split)."""
    total_pics = sum(len(s.images) for s in sets.values())
    total_inst = sum(len(s.instances) for s in sets.values())
    rows = []
    per_split_hist = {}
    class_hist: dict[str, int] = {}
    for split, annset in sets.items():
        names = annset.class_names
        hist = {n: 0 for n in names}
        for inst in annset.instances:
            hist[names[inst.class_id]] += 1
        per_split_hist[split] = hist
        for n, c in hist.items():
            class_hist[n] = class_hist.get(n, 0) + c
        rows.append(SplitRow(
            name=split,
            pictures=len(annset.images),
            instances=len(annset.instances),
            pictures_pct=100.0 * len(annset.images) / total_pics if total_pics else 0.0,
            instances_pct=100.0 * len(annset.instances) / total_inst if total_inst else 0.0,
        ))
    return StatsTable(rows=rows, class_histogram=class_hist, per_split_histogram=per_split_hist)


def autosplit(annset: AnnotationSet, seed: int = 0, fractions=(0.70, 0.23, 0.07)) -> dict:
    """Seeded train/test/val split mirroring the usual corpus proportions."""
    ids = [im.id for im in annset.images]
    rng = np.random.default_rng(seed)
    rng.shuffle(ids)
    n = len(ids)
    n_train = int(round(fractions[0] * n))
    n_test = int(round(fractions[1] * n))
    return {
        "train": ids[:n_train],
        "test": ids[n_train:n_train + n_test],
        "val": ids[n_train + n_test:],
    }


# -- letterboxing ------------------------------------------------------------


@dataclass
class LetterboxTransform:
    """Similarity transform taking source pixels into the padded square."""

    scale: float
    pad_x: float
    pad_y: float
    target: int
    src_width: int
    src_height: int

    def apply_box(self, box) -> tuple:
        x1, y1, x2, y2 = box
        return (x1 * self.scale + self.pad_x, y1 * self.scale + self.pad_y,
                x2 * self.scale + self.pad_x, y2 * self.scale + self.pad_y)

    def invert_box(self, box) -> tuple:
        x1, y1, x2, y2 = box
        return ((x1 - self.pad_x) / self.scale, (y1 - self.pad_y) / self.scale,
                (x2 - self.pad_x) / self.scale, (y2 - self.pad_y) / self.scale)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape
    if (out_h, out_w) == (h, w):
        return img.astype(np.float32, copy=True)
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    img = img.astype(np.float64)
    top = img[y0][:, x0] * (1.0 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1.0 - wx) + img[y1][:, x1] * wx
    return (top * (1.0 - wy) + bot * wy).astype(np.float32)


def letterbox(image: np.ndarray, target: int) -> tuple[np.ndarray, LetterboxTransform]:
    """Aspect-preserving resize of the longest side to ``target`` plus
    symmetric padding of the shorter side with the standard gray fill."""
    if target % 32 != 0:
        raise UsageError(f"letterbox target {target} must be divisible by 32")
    h, w = image.shape
    scale = target / max(h, w)
    new_h = int(round(h * scale))
    new_w = int(round(w * scale))
    resized = resize_bilinear(image, new_h, new_w)
    canvas = np.full((target, target), LETTERBOX_FILL, dtype=np.float32)
    pad_y = (target - new_h) // 2
    pad_x = (target - new_w) // 2
    canvas[pad_y:pad_y + new_h, pad_x:pad_x + new_w] = resized
    return canvas, LetterboxTransform(scale=scale, pad_x=float(pad_x), pad_y=float(pad_y),
                                      target=target, src_width=w, src_height=h)


# -- image containers --------------------------------------------------------


def write_pgm(path: str, image01: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image01) * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ParseError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ParseError(f"{path}: unsupported PGM maxval {maxval}")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=pos)
    if pixels.size != h * w:
        raise ParseError(f"{path}: PGM payload truncated")
    return (pixels.reshape(h, w).astype(np.float32)) / 255.0


def read_image(path: str) -> np.ndarray:
    p = str(path)
    if p.endswith(".npy"):
        arr = np.load(p)
        if arr.ndim != 2:
            raise ParseError(f"{path}: expected 2-D grayscale array, got shape {arr.shape}")
        arr = arr.astype(np.float32)
        if arr.max() > 1.0:
            arr = arr / 255.0
        return np.clip(arr, 0.0, 1.0)
    return read_pgm(p)


# -- in-memory training dataset ----------------------------------------------


@dataclass
class DetectionDataset:
    """Images plus per-image ground truths, as the trainer consumes them."""

    images: list  # (H, W) float32 arrays in [0, 1]
    gts: list  # per image: list of (class_id, (x_min, y_min, x_max, y_max))
    class_names: list

    def __len__(self):
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def dataset_from_annotations(annset: AnnotationSet, images_dir: str) -> DetectionDataset:
    import os

    per_image = annset.instances_by_image()
    images = []
    gts = []
    for im in annset.images:
        images.append(read_image(os.path.join(images_dir, im.file_name)))
        gts.append([(inst.class_id, inst.xyxy) for inst in per_image[im.id]])
    return DetectionDataset(images=images, gts=gts, class_names=annset.class_names)


# -- synthetic thermal scenes --------------------------------------------------

SHAPE_KINDS = ("rect", "disc", "triangle", "bar")


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(round(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kern = np.exp(-0.5 * (xs / sigma) ** 2)
    kern /= kern.sum()
    padded = np.pad(img, ((radius, radius), (0, 0)), mode="edge")
    img = np.einsum("ijk,i->jk", np.stack([padded[i:i + img.shape[0]] for i in range(2 * radius + 1)]), kern)
    padded = np.pad(img, ((0, 0), (radius, radius)), mode="edge")
    img = np.einsum("jik,i->jk", np.stack([padded[:, i:i + img.shape[1]] for i in range(2 * radius + 1)], axis=1), kern)
    return img


def _draw_shape(canvas: np.ndarray, kind: str, x1: int, y1: int, x2: int, y2: int, value: float):
    h, w = y2 - y1, x2 - x1
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "rect":
        mask = np.ones((h, w), dtype=bool)
    elif kind == "disc":
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        mask = ((yy - cy) / max(cy, 0.5)) ** 2 + ((xx - cx) / max(cx, 0.5)) ** 2 <= 1.0
    elif kind == "triangle":
        # upward triangle: apex centered on the top edge
        frac = (yy + 1) / h
        center = (w - 1) / 2.0
        mask = np.abs(xx - center) <= frac * w / 2.0
    elif kind == "bar":
        quarter = max(1, h // 4)
        mask = (yy >= quarter) & (yy < h - quarter)
    else:
        raise UsageError(f"unknown shape kind {kind!r}")
    region = canvas[y1:y2, x1:x2]
    region[mask] = np.maximum(region[mask], value)


def _class_quota(frequencies, total: int) -> list[int]:
    """Largest-remainder allocation of ``total`` instances to classes."""
    raw = [f * total for f in frequencies]
    counts = [int(math.floor(r)) for r in raw]
    remainder = total - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:remainder]:
        counts[i] += 1
    return counts


def synth_dataset(seed: int, n_images: int, class_frequencies, *,
                  image_size: int = 160, max_objects: int = 3,
                  class_names=None) -> DetectionDataset:
    """Deterministic grayscale scenes of blurred geometric blobs.

    Classes map to distinct shapes (rectangle, disc, triangle, bar, cycling
    with an intensity shift beyond four). Class identity follows the
    requested frequencies exactly up to largest-remainder rounding.
    Regeneration with the same arguments is byte-identical.
    """
    freqs = [float(f) for f in class_frequencies]
    if not freqs or abs(sum(freqs) - 1.0) > 1e-6:
        raise UsageError(f"class frequencies must sum to 1, got {freqs}")
    if class_names is None:
        class_names = [f"class{i}" for i in range(len(freqs))]
    master = np.random.SeedSequence(seed)
    deal_rng = np.random.default_rng(master.spawn(1)[0])
    image_seeds = master.spawn(n_images + 1)[1:]

    counts = [int(np.random.default_rng(s).integers(1, max_objects + 1)) for s in image_seeds]
    total = sum(counts)
    labels = []
    for cid, quota in enumerate(_class_quota(freqs, total)):
        labels.extend([cid] * quota)
    labels = np.array(labels)
    deal_rng.shuffle(labels)

    images = []
    gts = []
    cursor = 0
    for idx in range(n_images):
        rng = np.random.default_rng(image_seeds[idx])
        k = counts[idx]
        n_objects = int(rng.integers(1, max_objects + 1))
        assert n_objects == k
        cls = labels[cursor:cursor + k]
        cursor += k

        base = rng.uniform(0.10, 0.25)
        canvas = np.full((image_size, image_size), base, dtype=np.float64)
        boxes = []
        for cid in cls:
            contrast = 0.45 + 0.12 * (int(cid) // len(SHAPE_KINDS))
            kind = SHAPE_KINDS[int(cid) % len(SHAPE_KINDS)]
            for attempt in range(20):
                side = int(rng.integers(12, max(14, image_size // 2)))
                aspect = rng.uniform(0.7, 1.4) if kind != "bar" else rng.uniform(2.0, 3.0)
                bw = min(max(10, int(round(side * aspect))), image_size - 4)
                bh = min(max(10, side), image_size - 4)
                x1 = int(rng.integers(2, image_size - bw - 1))
                y1 = int(rng.integers(2, image_size - bh - 1))
                box = (float(x1), float(y1), float(x1 + bw), float(y1 + bh))
                if all(_box_iou(box, b[1]) < 0.2 for b in boxes) or attempt == 19:
                    break
            _draw_shape(canvas, kind, x1, y1, x1 + bw, y1 + bh, base + contrast)
            boxes.append((int(cid), box))
        canvas = _gaussian_blur(canvas, sigma=1.0)
        canvas += rng.normal(0.0, 0.02, canvas.shape)
        images.append(np.clip(canvas, 0.0, 1.0).astype(np.float32))
        gts.append(boxes)
    return DetectionDataset(images=images, gts=gts, class_names=list(class_names))


def synth_to_annotations(ds: DetectionDataset, file_prefix: str = "synth") -> AnnotationSet:
    """Express a synthetic dataset in the annotation schema (for export)."""
    images = [
        ImageInfo(id=i, file_name=f"{file_prefix}_{i:05d}.pgm",
                  width=ds.images[i].shape[1], height=ds.images[i].shape[0])
        for i in range(len(ds))
    ]
    instances = []
    for i, gts in enumerate(ds.gts):
        for cid, (x1, y1, x2, y2) in gts:
            instances.append(GroundTruthInstance(
                image_id=i, class_id=int(cid), box=(x1, y1, x2 - x1, y2 - y1)))
    categories = {name: i for i, name in enumerate(ds.class_names)}
    return AnnotationSet(images=images, instances=instances, categories=categories)
