"""Bounding boxes, the normalized text annotation format, and image tiling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

CLASS_NAMES = {0: "prairie_dog", 1: "burrow"}


class AnnotationFormatError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixel coordinates, origin top-left, max edges exclusive."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def translate(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def intersect(self, other: "BBox") -> "BBox | None":
        x0, y0 = max(self.x_min, other.x_min), max(self.y_min, other.y_min)
        x1, y1 = min(self.x_max, other.x_max), min(self.y_max, other.y_max)
        if x0 < x1 and y0 < y1:
            return BBox(x0, y0, x1, y1)
        return None

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_cxcywh(cls, cx, cy, w, h, image_w=1.0, image_h=1.0) -> "BBox":
        return cls((cx - w / 2) * image_w, (cy - h / 2) * image_h,
                   (cx + w / 2) * image_w, (cy + h / 2) * image_h)

    def to_cxcywh(self, image_w=1.0, image_h=1.0) -> tuple[float, float, float, float]:
        return ((self.x_min + self.x_max) / 2 / image_w, (self.y_min + self.y_max) / 2 / image_h,
                self.width / image_w, self.height / image_h)


@dataclass(frozen=True)
class Annotation:
    bbox: BBox
    class_id: int
    source: str = "labeled"  # or "synthetic"

    def __post_init__(self):
        if self.class_id not in CLASS_NAMES:
            raise ValueError(f"class id {self.class_id} not in registry {sorted(CLASS_NAMES)}")


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    class_id: int
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class TileSpec:
    tile_size: int = 512
    overlap: int = 0
    min_box_visibility: float = 0.4

    def __post_init__(self):
        if self.tile_size < 1:
            raise ValueError("tile_size must be >= 1")
        if not 0 <= self.overlap < self.tile_size:
            raise ValueError(f"overlap must be in [0, tile_size), got {self.overlap}")
        if not 0 < self.min_box_visibility <= 1:
            raise ValueError(f"min_box_visibility must be in (0, 1], got {self.min_box_visibility}")


def _parse_lines(path, n_fields):
    path = Path(path)
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != n_fields:
            raise AnnotationFormatError(f"{path}:{lineno}: expected {n_fields} fields, got {len(parts)}")
        try:
            cls = int(parts[0])
            nums = [float(p) for p in parts[1:]]
        except ValueError as e:
            raise AnnotationFormatError(f"{path}:{lineno}: {e}") from None
        geom = nums[-4:]
        if any(not (0.0 <= v <= 1.0) for v in geom):
            raise AnnotationFormatError(f"{path}:{lineno}: normalized coordinates outside [0, 1]: {geom}")
        if geom[2] <= 0 or geom[3] <= 0:
            raise AnnotationFormatError(f"{path}:{lineno}: degenerate box (w={geom[2]}, h={geom[3]})")
        yield lineno, cls, nums


def read_annotations(path, image_w, image_h, source="labeled") -> list[Annotation]:
    """Read ``class cx cy w h`` lines into pixel-space annotations."""
    out = []
    for lineno, cls, (cx, cy, w, h) in _parse_lines(path, 5):
        try:
            out.append(Annotation(BBox.from_cxcywh(cx, cy, w, h, image_w, image_h), cls, source))
        except ValueError as e:
            raise AnnotationFormatError(f"{path}:{lineno}: {e}") from None
    return out


def read_detections(path, image_w, image_h) -> list[Detection]:
    """Read ``class conf cx cy w h`` lines."""
    out = []
    for lineno, cls, (conf, cx, cy, w, h) in _parse_lines(path, 6):
        try:
            out.append(Detection(BBox.from_cxcywh(cx, cy, w, h, image_w, image_h), cls, conf))
        except ValueError as e:
            raise AnnotationFormatError(f"{path}:{lineno}: {e}") from None
    return out


def _fmt(v: float) -> str:
    s = f"{v:.6f}"
    return "0.000000" if s == "-0.000000" else s


def write_annotations(path, annotations, image_w, image_h) -> None:
    lines = []
    for a in annotations:
        geom = a.bbox.to_cxcywh(image_w, image_h)
        lines.append(" ".join([str(a.class_id)] + [_fmt(v) for v in geom]))
    Path(path).write_text("".join(line + "\n" for line in lines))


def write_detections(path, detections, image_w, image_h) -> None:
    lines = []
    for d in detections:
        geom = d.bbox.to_cxcywh(image_w, image_h)
        lines.append(" ".join([str(d.class_id), _fmt(d.confidence)] + [_fmt(v) for v in geom]))
    Path(path).write_text("".join(line + "\n" for line in lines))


def tile_offsets(length: int, tile: int, stride: int) -> list[int]:
    """Grid starts along one axis; the last tile is pushed flush with the edge."""
    if length < tile:
        raise ValueError(f"image dimension {length} smaller than tile size {tile}")
    starts = list(range(0, length - tile + 1, stride))
    if starts[-1] != length - tile:
        starts.append(length - tile)
    return starts


def clip_to_tile(annotations, x0, y0, tile_size, min_visibility):
    """Clip boxes to a tile window, keep those with enough visible area, shift to tile frame."""
    window = BBox(x0, y0, x0 + tile_size, y0 + tile_size)
    kept = []
    for a in annotations:
        clipped = a.bbox.intersect(window)
        if clipped is None:
            continue
        if clipped.area >= min_visibility * a.bbox.area:
            kept.append(replace(a, bbox=clipped.translate(-x0, -y0)))
    return kept


def tile_image(image: np.ndarray, annotations, spec: TileSpec = TileSpec()):
    """Cut an image into ``tile_size`` squares.

    Returns a list of ``(tile, tile_annotations, (x_offset, y_offset))`` in
    row-major order.
    """
    h, w = image.shape[:2]
    t = spec.tile_size
    stride = t - spec.overlap
    tiles = []
    for y0 in tile_offsets(h, t, stride):
        for x0 in tile_offsets(w, t, stride):
            tile = image[y0:y0 + t, x0:x0 + t].copy()
            anns = clip_to_tile(annotations, x0, y0, t, spec.min_box_visibility)
            tiles.append((tile, anns, (x0, y0)))
    return tiles


def dataset_stats(tiles, class_ids=None) -> dict:
    """Per-class counts, boxes per tile, and box width/height extremes.

    ``tiles`` is an iterable of annotation lists, one per tile.
    """
    class_ids = sorted(CLASS_NAMES) if class_ids is None else list(class_ids)
    n_tiles = 0
    sizes = {c: [] for c in class_ids}
    for anns in tiles:
        n_tiles += 1
        for a in anns:
            sizes.setdefault(a.class_id, []).append((a.bbox.width, a.bbox.height))

    per_class = {}
    for c, wh in sorted(sizes.items()):
        arr = np.asarray(wh, dtype=np.float64).reshape(-1, 2)
        entry = {
            "name": CLASS_NAMES.get(c, str(c)),
            "count": len(wh),
            "per_tile": len(wh) / n_tiles if n_tiles else 0.0,
        }
        for axis, key in ((0, "width"), (1, "height")):
            if len(wh):
                col = arr[:, axis]
                entry[key] = {"min": float(col.min()), "mean": float(col.mean()), "max": float(col.max())}
            else:
                entry[key] = {"min": 0.0, "mean": 0.0, "max": 0.0}
        per_class[str(c)] = entry
    return {"num_tiles": n_tiles, "classes": per_class}


def dataset_stats_from_manifest(manifest, default_size=(512, 512)) -> dict:
    """Statistics over a manifest of tiles.

    Each entry is paired by stem with ``<stem>.txt`` (annotations) and
    ``<stem>.png`` (image, only used for pixel dims; ``default_size`` is used
    when absent). Entries whose annotation file is missing are skipped and
    listed under ``missing``.
    """
    from .imageio import image_size, read_manifest

    missing = []

    def records():
        for entry in read_manifest(manifest):
            ann = entry.with_suffix(".txt")
            if not ann.exists():
                missing.append(str(ann))
                continue
            img = entry.with_suffix(".png")
            w, h = image_size(img) if img.exists() else default_size
            yield read_annotations(ann, w, h)

    report = dataset_stats(records())
    report["missing"] = missing
    if missing:
        log.warning("%d manifest entries have no annotation file", len(missing))
    return report


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))
