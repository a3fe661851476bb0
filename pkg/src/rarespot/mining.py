"""Detection/ground-truth matching and hard-example patch extraction."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .annotations import BBox

log = logging.getLogger(__name__)

ORIGINS = ("labeled", "fp", "fn")


def iou(a: BBox, b: BBox) -> float:
    inter = a.intersect(b)
    if inter is None:
        return 0.0
    ia = inter.area
    return ia / (a.area + b.area - ia)


@dataclass
class MatchResult:
    tp: list = field(default_factory=list)  # (detection, annotation) pairs
    fp: list = field(default_factory=list)
    fn: list = field(default_factory=list)


def match_indices(dets, gts, iou_thresh=0.5):
    """Greedy same-class matching in descending confidence.

    Returns ``(pairs, fp_idx, fn_idx)`` with ``pairs`` a list of
    ``(det_index, gt_index)`` in processing order. Confidence ties go to the
    lower detection index, IoU ties to the lower GT index.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    taken = [False] * len(gts)
    pairs, fp = [], []
    for i in order:
        d = dets[i]
        best, best_iou = -1, -1.0
        for j, g in enumerate(gts):
            if taken[j] or g.class_id != d.class_id:
                continue
            v = iou(d.bbox, g.bbox)
            if v >= iou_thresh and v > best_iou:
                best, best_iou = j, v
        if best < 0:
            fp.append(i)
        else:
            taken[best] = True
            pairs.append((i, best))
    fn = [j for j in range(len(gts)) if not taken[j]]
    return pairs, fp, fn


def match(dets, gts, iou_thresh: float = 0.5) -> MatchResult:
    pairs, fp, fn = match_indices(dets, gts, iou_thresh)
    return MatchResult(
        tp=[(dets[i], gts[j]) for i, j in pairs],
        fp=[dets[i] for i in fp],
        fn=[gts[j] for j in fn],
    )


@dataclass(frozen=True)
class Patch:
    """An RGB crop around an object plus where it came from.

    ``object_box`` is the object's box in patch-local pixel coordinates and
    ``mask`` marks valid pixels (all true for a plain crop; rotation leaves
    invalid corners).
    """

    pixels: np.ndarray
    origin: str
    class_id: int | None
    source_image: str
    source_bbox: BBox
    object_box: BBox
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.origin not in ORIGINS:
            raise ValueError(f"origin must be one of {ORIGINS}, got {self.origin!r}")
        if self.mask is None:
            object.__setattr__(self, "mask", np.ones(self.pixels.shape[:2], dtype=bool))
        if self.mask.shape != self.pixels.shape[:2]:
            raise ValueError("mask shape does not match patch pixels")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def annotated(self) -> bool:
        """FN and labeled patches are pasted with an annotation; FP patches are distractors."""
        return self.origin != "fp"


def crop_window(box: BBox, image_w: int, image_h: int, pad: int):
    x0 = max(0, math.floor(box.x_min) - pad)
    y0 = max(0, math.floor(box.y_min) - pad)
    x1 = min(image_w, math.ceil(box.x_max) + pad)
    y1 = min(image_h, math.ceil(box.y_max) + pad)
    return x0, y0, x1, y1


def extract_patches(image: np.ndarray, result: MatchResult, pad: int = 4,
                    source_image: str = "", include_labeled: bool = True,
                    include_fp: bool = True) -> list[Patch]:
    """Crop FN, FP and (matched) labeled objects with ``pad`` pixels of context.

    Labeled patches come from the TP-matched ground truth, so every GT box
    yields exactly one patch (FN or labeled).
    """
    h, w = image.shape[:2]
    items = [("fn", a.bbox, a.class_id) for a in result.fn]
    if include_fp:
        items += [("fp", d.bbox, d.class_id) for d in result.fp]
    if include_labeled:
        items += [("labeled", a.bbox, a.class_id) for _, a in result.tp]

    patches = []
    for origin, box, cls in items:
        x0, y0, x1, y1 = crop_window(box, w, h, pad)
        if x1 - x0 < 1 or y1 - y0 < 1:
            log.warning("skipping degenerate %s crop at %s in %s", origin, box.as_list(), source_image)
            continue
        local = box.intersect(BBox(x0, y0, x1, y1))
        if local is None:
            log.warning("skipping %s box outside image: %s", origin, box.as_list())
            continue
        patches.append(Patch(
            pixels=image[y0:y1, x0:x1].copy(),
            origin=origin,
            class_id=cls,
            source_image=source_image,
            source_bbox=box,
            object_box=local.translate(-x0, -y0),
        ))
    return patches


INDEX_NAME = "patches.json"


def save_patches(patches, out_dir) -> Path:
    """Write PNG crops and a ``patches.json`` index into ``out_dir``."""
    from .imageio import write_image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for k, p in enumerate(patches):
        name = f"patch_{k:05d}_{p.origin}.png"
        write_image(out_dir / name, p.pixels)
        index.append({
            "file": name,
            "origin": p.origin,
            "class_id": p.class_id,
            "source_image": p.source_image,
            "source_box": p.source_bbox.as_list(),
            "object_box": p.object_box.as_list(),
        })
    path = out_dir / INDEX_NAME
    path.write_text(json.dumps(index, indent=2) + "\n")
    return path


def load_patches(patch_dir) -> list[Patch]:
    from .imageio import read_image

    patch_dir = Path(patch_dir)
    index = json.loads((patch_dir / INDEX_NAME).read_text())
    return [
        Patch(
            pixels=read_image(patch_dir / e["file"]),
            origin=e["origin"],
            class_id=e["class_id"],
            source_image=e["source_image"],
            source_bbox=BBox(*e["source_box"]),
            object_box=BBox(*e["object_box"]),
        )
        for e in index
    ]
