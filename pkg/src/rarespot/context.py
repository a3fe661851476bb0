"""HSV habitat segmentation of background images into dirt/grass/other."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

OTHER, DIRT, GRASS = 0, 1, 2
LABEL_NAMES = {OTHER: "other", DIRT: "dirt", GRASS: "grass"}
LABEL_IDS = {v: k for k, v in LABEL_NAMES.items()}
# gray levels used in exported label PNGs
PNG_VALUES = {OTHER: 0, DIRT: 128, GRASS: 255}


@dataclass(frozen=True)
class HSVThresholds:
    """Hue in degrees [0, 360), saturation and value in [0, 1]."""

    grass_hue: tuple[float, float] = (60.0, 170.0)
    grass_min_sat: float = 0.15
    grass_min_val: float = 0.1
    dirt_max_sat: float = 0.5
    dirt_val: tuple[float, float] = (0.15, 0.95)
    smooth: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "HSVThresholds":
        d = dict(d)
        for key in ("grass_hue", "dirt_val"):
            if key in d:
                d[key] = tuple(float(v) for v in d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown HSV threshold keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class ContextMap:
    labels: np.ndarray  # H x W uint8 of OTHER/DIRT/GRASS
    thresholds: HSVThresholds

    def fraction(self, label: int) -> float:
        return float(np.mean(self.labels == label))

    def to_png_values(self) -> np.ndarray:
        lut = np.zeros(256, dtype=np.uint8)
        for k, v in PNG_VALUES.items():
            lut[k] = v
        return lut[self.labels]


def rgb_to_hsv(image: np.ndarray) -> np.ndarray:
    """uint8 RGB -> float32 HSV with H in degrees, S and V in [0, 1]."""
    return cv2.cvtColor(image.astype(np.float32) / 255.0, cv2.COLOR_RGB2HSV)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    return cv2.cvtColor(hsv.astype(np.float32), cv2.COLOR_HSV2RGB)


def majority_smooth(labels: np.ndarray, n_labels: int = 3) -> np.ndarray:
    """3x3 majority vote with edge replication; ties keep the center label
    when it is among the winners, else the lowest winning label."""
    counts = np.stack([
        ndimage.convolve((labels == k).astype(np.int32), np.ones((3, 3), np.int32), mode="nearest")
        for k in range(n_labels)
    ])
    best = counts.max(axis=0)
    center_count = np.take_along_axis(counts, labels[None].astype(np.intp), axis=0)[0]
    return np.where(center_count == best, labels, counts.argmax(axis=0)).astype(np.uint8)


def build_context_map(image: np.ndarray, thresholds: HSVThresholds = HSVThresholds()) -> ContextMap:
    hsv = rgb_to_hsv(image)
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    t = thresholds
    grass = (h >= t.grass_hue[0]) & (h <= t.grass_hue[1]) & (s >= t.grass_min_sat) & (v >= t.grass_min_val)
    dirt = ~grass & (s < t.dirt_max_sat) & (v >= t.dirt_val[0]) & (v <= t.dirt_val[1])
    labels = np.full(image.shape[:2], OTHER, dtype=np.uint8)
    labels[dirt] = DIRT
    labels[grass] = GRASS
    if t.smooth:
        labels = majority_smooth(labels)
    return ContextMap(labels, thresholds)


def save_context_map(cmap: ContextMap, png_path) -> Path:
    """Write the label PNG (dirt=128, grass=255, other=0) and a JSON sidecar."""
    from .imageio import write_image

    png_path = Path(png_path)
    write_image(png_path, cmap.to_png_values())
    sidecar = png_path.with_suffix(".json")
    meta = {
        "thresholds": asdict(cmap.thresholds),
        "png_values": {LABEL_NAMES[k]: v for k, v in PNG_VALUES.items()},
        "fractions": {LABEL_NAMES[k]: cmap.fraction(k) for k in LABEL_NAMES},
    }
    sidecar.write_text(json.dumps(meta, indent=2) + "\n")
    return sidecar
