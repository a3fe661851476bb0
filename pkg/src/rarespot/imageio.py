"""PNG read/write in RGB channel order, plus manifest helpers."""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np


def read_image(path) -> np.ndarray:
    """Read an 8-bit image as an H x W x 3 RGB array."""
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise OSError(f"cannot read image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def write_image(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise ValueError(f"expected uint8 image, got {image.dtype}")
    if image.ndim == 3:
        image = cv2.cvtColor(image, cv2.COLOR_RGB2BGR)
    ok, buf = cv2.imencode(".png", image)
    if not ok:
        raise OSError(f"PNG encoding failed for {path}")
    Path(path).write_bytes(buf.tobytes())


def image_size(path) -> tuple[int, int]:
    """(width, height) of an image file."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise OSError(f"cannot read image {path}")
    return img.shape[1], img.shape[0]


def read_manifest(path) -> list[Path]:
    """Newline-separated paths, resolved relative to the manifest's directory."""
    path = Path(path)
    base = path.parent
    out = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            out.append(base / line)
    return out


def write_manifest(path, entries) -> None:
    path = Path(path)
    lines = []
    for e in entries:
        e = Path(e)
        try:
            e = e.relative_to(path.parent)
        except ValueError:
            pass
        lines.append(e.as_posix())
    path.write_text("".join(line + "\n" for line in lines))


def index_by_stem(source, suffix: str = ".txt") -> dict[str, Path]:
    """Map file stem -> path, from a directory (globbing ``suffix``) or a manifest file."""
    source = Path(source)
    if source.is_dir():
        files = sorted(source.glob(f"*{suffix}"))
    else:
        files = read_manifest(source)
    return {f.stem: f for f in files}
