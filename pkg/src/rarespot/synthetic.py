"""Small synthetic aerial-like dataset for smoke tests and demos.

Images are dirt/grass textures with tan blobs (class 0) and dark round
burrows (class 1). A fake detector output is produced alongside so the
mining and evaluation steps have something to chew on.
"""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

from .annotations import Annotation, BBox, Detection, write_annotations, write_detections
from .imageio import write_image, write_manifest

DIRT_RGB = (150, 120, 90)
GRASS_RGB = (70, 130, 50)


def terrain(size: int, rng: np.random.Generator, grass_share: float = 0.35) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 10)
    grass = field_ > np.quantile(field_, 1.0 - grass_share)
    img = np.where(grass[..., None], GRASS_RGB, DIRT_RGB).astype(np.float64)
    img += rng.normal(0.0, 8.0, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _draw_object(img, cls, cx, cy, r, rng):
    if cls == 0:
        color = tuple(int(v) for v in rng.integers([185, 160, 110], [215, 185, 135]))
        cv2.ellipse(img, (cx, cy), (r, int(r * 0.75)), float(rng.uniform(0, 180)), 0, 360, color, -1)
        cv2.circle(img, (cx, cy - r // 3), max(1, r // 4), (90, 70, 50), -1)
    else:
        cv2.circle(img, (cx, cy), r, (60, 45, 35), -1)
        cv2.circle(img, (cx, cy), max(1, r // 2), (25, 20, 15), -1)


def make_image(size: int, rng: np.random.Generator, n_objects: int):
    img = terrain(size, rng)
    anns = []
    for _ in range(n_objects):
        cls = int(rng.random() < 0.6)
        r = int(rng.integers(6, 10)) if cls == 0 else int(rng.integers(8, 14))
        for _try in range(20):
            cx, cy = (int(v) for v in rng.integers(r + 2, size - r - 2, size=2))
            box = BBox(cx - r, cy - r, cx + r + 1, cy + r + 1)
            if all(box.intersect(a.bbox) is None for a in anns):
                _draw_object(img, cls, cx, cy, r, rng)
                anns.append(Annotation(box, cls))
                break
    return img, anns


def fake_detections(anns, size, rng: np.random.Generator, recall=0.8, n_false=2):
    """Jittered copies of most GT boxes plus a few spurious boxes."""
    dets = []
    for a in anns:
        if rng.random() > recall:
            continue
        b = a.bbox
        j = rng.normal(0.0, 0.06 * b.width, 4)
        box = BBox(max(0.0, b.x_min + j[0]), max(0.0, b.y_min + j[1]),
                   min(size, b.x_max + j[2]), min(size, b.y_max + j[3]))
        dets.append(Detection(box, a.class_id, float(np.round(rng.uniform(0.3, 0.99), 6))))
    for _ in range(int(rng.integers(0, n_false + 1))):
        s = float(rng.uniform(12, 24))
        x, y = rng.uniform(2, size - s - 2, 2)
        dets.append(Detection(BBox(x, y, x + s, y + s), int(rng.integers(0, 2)),
                              float(np.round(rng.uniform(0.05, 0.7), 6))))
    return dets


def make_dataset(out_dir, num_images: int = 20, size: int = 256, num_backgrounds: int | None = None,
                 seed: int = 0, objects_per_image=(3, 7)) -> dict:
    """Write ``images/``, ``labels/``, ``dets/``, ``backgrounds/`` and manifests under ``out_dir``."""
    out = Path(out_dir)
    num_backgrounds = num_images if num_backgrounds is None else num_backgrounds
    for sub in ("images", "labels", "dets", "backgrounds"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    images, backgrounds = [], []
    for k in range(num_images):
        img, anns = make_image(size, rng, int(rng.integers(*objects_per_image)))
        stem = f"img_{k:03d}"
        write_image(out / "images" / f"{stem}.png", img)
        write_annotations(out / "labels" / f"{stem}.txt", anns, size, size)
        write_detections(out / "dets" / f"{stem}.txt", fake_detections(anns, size, rng), size, size)
        images.append(out / "images" / f"{stem}.png")
    for k in range(num_backgrounds):
        path = out / "backgrounds" / f"bg_{k:03d}.png"
        write_image(path, terrain(size, rng))
        backgrounds.append(path)
    write_manifest(out / "images.txt", images)
    write_manifest(out / "backgrounds.txt", backgrounds)
    write_manifest(out / "labels.txt", [out / "labels" / f"{p.stem}.txt" for p in images])
    write_manifest(out / "dets.txt", [out / "dets" / f"{p.stem}.txt" for p in images])
    return {"images": len(images), "backgrounds": len(backgrounds)}
