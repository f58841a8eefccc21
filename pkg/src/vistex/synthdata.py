"""Deterministic synthetic shapes detection dataset.

Images are 64x64 RGB renders of anti-aliased solid shapes on a low-amplitude
noise background.  Every image belongs to one class and contains 1..4
instances of it.  Generation is a pure function of (config, seed): each
image draws from its own RNG stream keyed by (seed, image_id), so images
could be rendered in parallel without changing the output.
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .config import DataConfig
from .errors import InsufficientDataError, InvalidInputError, InvalidSplitError

SHAPE_KINDS = ("circle", "square", "triangle", "cross", "ring", "diamond", "plus", "star")

_COLOR_NAMES = (
    "red", "orange", "amber", "yellow", "lime", "green", "teal", "cyan",
    "azure", "blue", "violet", "purple", "magenta", "pink", "crimson", "coral",
    "olive", "mint", "navy", "rust",
)

_MIN_BOX_PX = 8


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    name: str
    shape_kind: str
    color: tuple[float, float, float]
    is_novel: bool


@dataclass
class AnnotatedImage:
    """Pixels in [0,1] plus aligned box/label annotations."""

    pixels: np.ndarray                     # H0 x W0 x 3 float32
    boxes: list[tuple[float, float, float, float]]
    labels: list[int]

    def __post_init__(self) -> None:
        h, w = self.pixels.shape[:2]
        if len(self.boxes) != len(self.labels):
            raise InvalidInputError("boxes and labels must align")
        for x0, y0, x1, y1 in self.boxes:
            if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
                raise InvalidInputError(f"box ({x0},{y0},{x1},{y1}) out of bounds")


@dataclass
class ImageRecord:
    image_id: int
    file: str
    boxes: list[tuple[float, float, float, float]]
    labels: list[int]


@dataclass
class DatasetManifest:
    seed: int
    classes: list[ClassSpec]
    images: list[ImageRecord]
    base_ids: list[int]
    novel_ids: list[int]
    root: Path | None = None
    _by_class: dict[int, list[ImageRecord]] = field(default_factory=dict, repr=False)

    def class_by_id(self, class_id: int) -> ClassSpec:
        return self.classes[class_id]

    def records_for_class(self, class_id: int) -> list[ImageRecord]:
        if not self._by_class:
            for rec in self.images:
                self._by_class.setdefault(rec.labels[0], []).append(rec)
        return self._by_class.get(class_id, [])

    def record(self, image_id: int) -> ImageRecord:
        return self.images[image_id]

    def load_image(self, image_id: int) -> AnnotatedImage:
        if self.root is None:
            raise InvalidInputError("manifest has no dataset root directory")
        rec = self.images[image_id]
        arr = np.asarray(Image.open(self.root / rec.file), dtype=np.float32) / 255.0
        return AnnotatedImage(pixels=arr, boxes=list(rec.boxes), labels=list(rec.labels))

    @property
    def base_class_names(self) -> list[str]:
        return [self.classes[c].name for c in self.base_ids]

    @property
    def all_class_ids(self) -> list[int]:
        return [c.class_id for c in self.classes]


@dataclass
class EpisodeSpec:
    k: int
    support_ids: dict[int, list[int]]
    query_ids: list[int]
    class_subset: list[int]

    def __post_init__(self) -> None:
        support = {i for ids in self.support_ids.values() for i in ids}
        if support & set(self.query_ids):
            raise InvalidInputError("support and query image ids overlap")
        for c in self.class_subset:
            if len(self.support_ids.get(c, [])) != self.k:
                raise InvalidInputError(f"class {c} does not have exactly k supports")


def split_classes(num_classes: int, num_novel: int, seed: int) -> tuple[list[int], list[int]]:
    """Disjoint, exhaustive base/novel partition of class ids, fixed by seed."""
    if not 1 <= num_novel < num_classes:
        raise InvalidSplitError(f"cannot take {num_novel} novel out of {num_classes} classes")
    rng = np.random.default_rng([seed, 0x5011])
    novel = sorted(rng.choice(num_classes, size=num_novel, replace=False).tolist())
    base = sorted(set(range(num_classes)) - set(novel))
    return base, novel


def make_class_specs(num_classes: int, novel_ids: list[int]) -> list[ClassSpec]:
    """Distinct (shape, color) per class; names are single vocabulary words."""
    specs = []
    for cid in range(num_classes):
        shape = SHAPE_KINDS[cid % len(SHAPE_KINDS)]
        hue = cid / num_classes
        color = colorsys.hsv_to_rgb(hue, 0.85, 0.95)
        cname = _COLOR_NAMES[cid] if cid < len(_COLOR_NAMES) else f"color{cid}"
        specs.append(
            ClassSpec(
                class_id=cid,
                name=f"{cname}_{shape}",
                shape_kind=shape,
                color=tuple(round(c, 4) for c in color),
                is_novel=cid in set(novel_ids),
            )
        )
    return specs


# ---------------------------------------------------------------------------
# Shape rendering: signed-distance fields sampled at pixel centers, softened
# over ~1px for anti-aliasing.


def _shape_field(kind: str, dx: np.ndarray, dy: np.ndarray, e: float) -> np.ndarray:
    """Signed distance-ish field; negative inside, ~pixel units near the edge."""
    ax, ay = np.abs(dx), np.abs(dy)
    if kind == "circle":
        return np.hypot(dx, dy) - e
    if kind == "square":
        return np.maximum(ax, ay) - e
    if kind == "diamond":
        return (ax + ay - e) / math.sqrt(2.0)
    if kind == "ring":
        return np.abs(np.hypot(dx, dy) - 0.72 * e) - 0.28 * e
    if kind == "plus":
        w = 0.32 * e
        return np.minimum(np.maximum(ax - e, ay - w), np.maximum(ay - e, ax - w))
    if kind == "cross":
        u = (dx + dy) / math.sqrt(2.0)
        v = (dx - dy) / math.sqrt(2.0)
        w = 0.32 * e
        return np.minimum(
            np.maximum(np.abs(u) - e, np.abs(v) - w),
            np.maximum(np.abs(v) - e, np.abs(u) - w),
        )
    if kind == "triangle":
        verts = [(0.0, -e), (0.95 * e, 0.8 * e), (-0.95 * e, 0.8 * e)]
        field = np.full_like(dx, -np.inf)
        n = len(verts)
        for i in range(n):
            x0, y0 = verts[i]
            x1, y1 = verts[(i + 1) % n]
            ex, ey = x1 - x0, y1 - y0
            norm = math.hypot(ex, ey)
            # outward normal of a clockwise-ordered convex polygon
            field = np.maximum(field, ((dx - x0) * ey - (dy - y0) * ex) / norm)
        return field
    if kind == "star":
        rho = np.hypot(dx, dy)
        theta = np.arctan2(dy, dx) + math.pi / 2.0  # tip points up
        saw = np.abs((theta * 5.0 / (2.0 * math.pi)) % 1.0 - 0.5) * 2.0
        radius = e * (0.48 + 0.52 * saw)
        return rho - radius
    raise InvalidInputError(f"unknown shape kind {kind!r}")


def _instance_alpha(size: int, kind: str, cx: float, cy: float,
                    e: float) -> tuple[np.ndarray, tuple[float, float, float, float] | None]:
    """Coverage field of one shape and its tight pixel box (None if off-canvas)."""
    xs = np.arange(size, dtype=np.float64) + 0.5
    dx, dy = np.meshgrid(xs - cx, xs - cy)
    field = _shape_field(kind, dx, dy, e)
    alpha = np.clip(0.5 - field, 0.0, 1.0)
    mask = alpha >= 0.5
    if not mask.any():
        return alpha, None
    ys_idx, xs_idx = np.nonzero(mask)
    box = (float(xs_idx.min()), float(ys_idx.min()),
           float(xs_idx.max() + 1), float(ys_idx.max() + 1))
    return alpha, box


def render_instance(canvas: np.ndarray, kind: str, color: tuple[float, float, float],
                    cx: float, cy: float, e: float) -> tuple[float, float, float, float] | None:
    """Alpha-composite one shape onto ``canvas`` and return its tight pixel box."""
    alpha, box = _instance_alpha(canvas.shape[0], kind, cx, cy, e)
    while box is not None and (box[2] - box[0] < _MIN_BOX_PX or box[3] - box[1] < _MIN_BOX_PX):
        e *= 1.25
        alpha, box = _instance_alpha(canvas.shape[0], kind, cx, cy, e)
    if box is None:
        return None
    canvas *= (1.0 - alpha)[..., None]
    canvas += alpha[..., None] * np.asarray(color, dtype=np.float64)
    return box


def _box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / ua


def render_image(spec: ClassSpec, config: DataConfig, rng: np.random.Generator) -> AnnotatedImage:
    """One image: noise background plus 1..max_instances shapes of one class."""
    size = config.image_size
    canvas = np.clip(rng.normal(0.25, config.noise_sigma, size=(size, size, 3)), 0.0, 1.0)
    n_inst = int(rng.integers(1, config.max_instances + 1))
    boxes: list[tuple[float, float, float, float]] = []
    for _ in range(n_inst):
        for _attempt in range(25):
            e = float(rng.uniform(5.5, 11.0))
            margin = e + 2.0
            cx = float(rng.uniform(margin, size - margin))
            cy = float(rng.uniform(margin, size - margin))
            cand = (cx - e, cy - e, cx + e, cy + e)
            if all(_box_iou(cand, b) <= 0.05 for b in boxes):
                break
        box = render_instance(canvas, spec.shape_kind, spec.color, cx, cy, e)
        if box is not None:
            boxes.append(box)
    labels = [spec.class_id] * len(boxes)
    return AnnotatedImage(pixels=canvas.astype(np.float32), boxes=boxes, labels=labels)


# ---------------------------------------------------------------------------
# Dataset assembly and on-disk layout: manifest.json + images/<id>.png


def generate_dataset(config: DataConfig, out_dir: str | Path, seed: int) -> DatasetManifest:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    base_ids, novel_ids = split_classes(config.num_classes, config.num_novel, seed)
    specs = make_class_specs(config.num_classes, novel_ids)

    records: list[ImageRecord] = []
    for spec in specs:
        for k in range(config.images_per_class):
            image_id = spec.class_id * config.images_per_class + k
            rng = np.random.default_rng([seed, image_id])
            img = render_image(spec, config, rng)
            fname = f"images/{image_id:05d}.png"
            Image.fromarray(np.round(img.pixels * 255.0).astype(np.uint8)).save(out / fname)
            records.append(ImageRecord(image_id, fname, img.boxes, img.labels))

    manifest = DatasetManifest(
        seed=seed, classes=specs, images=records,
        base_ids=base_ids, novel_ids=novel_ids, root=out,
    )
    write_manifest(manifest, out / "manifest.json")
    return manifest


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    doc = {
        "seed": manifest.seed,
        "classes": [
            {
                "id": c.class_id,
                "name": c.name,
                "shape": c.shape_kind,
                "color": list(c.color),
                "is_novel": c.is_novel,
            }
            for c in manifest.classes
        ],
        "images": [
            {"id": r.image_id, "file": r.file,
             "boxes": [list(b) for b in r.boxes], "labels": r.labels}
            for r in manifest.images
        ],
        "split": {"base": manifest.base_ids, "novel": manifest.novel_ids},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ": "), indent=1))


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    doc = json.loads(path.read_text())
    novel = set(doc["split"]["novel"])
    classes = [
        ClassSpec(
            class_id=c["id"], name=c["name"], shape_kind=c["shape"],
            color=tuple(c["color"]), is_novel=c["id"] in novel,
        )
        for c in sorted(doc["classes"], key=lambda c: c["id"])
    ]
    images = [
        ImageRecord(r["id"], r["file"], [tuple(b) for b in r["boxes"]], list(r["labels"]))
        for r in sorted(doc["images"], key=lambda r: r["id"])
    ]
    return DatasetManifest(
        seed=doc["seed"], classes=classes, images=images,
        base_ids=sorted(doc["split"]["base"]), novel_ids=sorted(doc["split"]["novel"]),
        root=path.parent,
    )


def validate_manifest(manifest: DatasetManifest) -> None:
    """Single-scan invariant check: box bounds, label alignment, split partition."""
    size = None
    for rec in manifest.images:
        if len(rec.boxes) != len(rec.labels):
            raise InvalidInputError(f"image {rec.image_id}: boxes/labels misaligned")
        if not 1 <= len(rec.boxes):
            raise InvalidInputError(f"image {rec.image_id}: no annotations")
        if size is None and manifest.root is not None:
            size = manifest.load_image(rec.image_id).pixels.shape[0]
        bound = size or 64
        for x0, y0, x1, y1 in rec.boxes:
            if not (0 <= x0 < x1 <= bound and 0 <= y0 < y1 <= bound):
                raise InvalidInputError(f"image {rec.image_id}: box out of bounds")
    ids = set(manifest.base_ids) | set(manifest.novel_ids)
    if set(manifest.base_ids) & set(manifest.novel_ids):
        raise InvalidSplitError("base and novel class ids overlap")
    if ids != {c.class_id for c in manifest.classes}:
        raise InvalidSplitError("split does not cover the class list")
    pairs = {(c.shape_kind, c.color) for c in manifest.classes}
    if len(pairs) != len(manifest.classes):
        raise InvalidSplitError("(shape, color) pairs are not unique")


def sample_episode(manifest: DatasetManifest, k: int, class_subset: list[int],
                   seed: int) -> EpisodeSpec:
    """K supports per class; the remaining images of those classes are queries."""
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    rng = np.random.default_rng([seed, 0xE915])
    support: dict[int, list[int]] = {}
    queries: list[int] = []
    for cid in class_subset:
        recs = manifest.records_for_class(cid)
        if len(recs) <= k:
            raise InsufficientDataError(
                f"class {cid} has {len(recs)} images, need more than k={k}"
            )
        ids = [r.image_id for r in recs]
        chosen = sorted(rng.choice(len(ids), size=k, replace=False).tolist())
        support[cid] = [ids[i] for i in chosen]
        queries.extend(i for n, i in enumerate(ids) if n not in set(chosen))
    return EpisodeSpec(k=k, support_ids=support, query_ids=sorted(queries),
                       class_subset=list(class_subset))
