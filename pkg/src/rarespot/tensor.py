"""Dense C x H x W feature maps for pyramid levels.

Values are held as float64 in [c][i][j] row-major order. The on-disk
container stores float32 and widens on load.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"RSPT"
FORMAT_VERSION = 1
DTYPE_F32 = 0
HEADER = struct.Struct("<4sIB3xIII")  # 24 bytes

# refuse to materialize upsampled maps beyond this many scalars
MAX_ELEMENTS = 1 << 31

UPSAMPLE_MODES = ("nearest", "bilinear")


class TensorFormatError(ValueError):
    """Raised when a tensor container file is malformed."""


@dataclass(frozen=True)
class FeatureMap:
    """Immutable C x H x W activation tensor."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64, order="C", copy=True)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"feature map must be C x H x W with all dims >= 1, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("feature map contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


@dataclass(frozen=True)
class PyramidSet:
    """Three pyramid levels: p3 (C x H x W), p4 (H/2), p5 (H/4)."""

    p3: FeatureMap
    p4: FeatureMap
    p5: FeatureMap

    def __post_init__(self):
        for name in ("p3", "p4", "p5"):
            v = getattr(self, name)
            if not isinstance(v, FeatureMap):
                object.__setattr__(self, name, FeatureMap(v))
        c, h, w = self.p3.shape
        if h % 4 or w % 4:
            raise ValueError(f"p3 spatial dims must be divisible by 4, got {h}x{w}")
        if self.p4.shape != (c, h // 2, w // 2):
            raise ValueError(f"p4 must be {(c, h // 2, w // 2)}, got {self.p4.shape}")
        if self.p5.shape != (c, h // 4, w // 4):
            raise ValueError(f"p5 must be {(c, h // 4, w // 4)}, got {self.p5.shape}")


def _as_array(x) -> np.ndarray:
    if isinstance(x, FeatureMap):
        return x.values
    return np.asarray(x, dtype=np.float64)


def interpolation_matrix(n_src: int, n_dst: int, mode: str = "nearest") -> np.ndarray:
    """1-D resampling matrix M of shape (n_dst, n_src), so that dst = M @ src.

    Bilinear uses half-pixel centers (align_corners=False) with edge clamping.
    """
    m = np.zeros((n_dst, n_src))
    if mode == "nearest":
        src = np.minimum((np.arange(n_dst) * n_src) // n_dst, n_src - 1)
        m[np.arange(n_dst), src] = 1.0
    elif mode == "bilinear":
        pos = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
        pos = np.clip(pos, 0.0, n_src - 1)
        i0 = np.floor(pos).astype(int)
        i1 = np.minimum(i0 + 1, n_src - 1)
        frac = pos - i0
        rows = np.arange(n_dst)
        np.add.at(m, (rows, i0), 1.0 - frac)
        np.add.at(m, (rows, i1), frac)
    else:
        raise ValueError(f"unknown upsample mode {mode!r}; expected one of {UPSAMPLE_MODES}")
    return m


def _check_target(src_shape, target_h, target_w):
    c, h, w = src_shape
    if target_h < 1 or target_w < 1:
        raise ValueError("target dims must be >= 1")
    if target_h < h or target_w < w:
        raise ValueError(f"cannot upsample {h}x{w} to smaller {target_h}x{target_w}")
    if c * target_h * target_w > MAX_ELEMENTS:
        raise OverflowError(f"upsampled map {c}x{target_h}x{target_w} exceeds {MAX_ELEMENTS} elements")


def upsample(src, target_h: int, target_w: int, mode: str = "nearest") -> FeatureMap:
    """Upsample a feature map to ``target_h x target_w``."""
    x = _as_array(src)
    _check_target(x.shape, target_h, target_w)
    if x.shape[1:] == (target_h, target_w):
        return src if isinstance(src, FeatureMap) else FeatureMap(x)
    mh = interpolation_matrix(x.shape[1], target_h, mode)
    mw = interpolation_matrix(x.shape[2], target_w, mode)
    return FeatureMap(np.einsum("ih,chw,jw->cij", mh, x, mw))


def upsample_adjoint(grad, src_h: int, src_w: int, mode: str = "nearest") -> np.ndarray:
    """Pull a gradient at the upsampled resolution back to the source grid.

    This is the transpose of :func:`upsample`: nearest scatter-adds into the
    source pixel, bilinear distributes by the interpolation weights.
    """
    g = _as_array(grad)
    _, th, tw = g.shape
    if (src_h, src_w) == (th, tw):
        return np.array(g)
    mh = interpolation_matrix(src_h, th, mode)
    mw = interpolation_matrix(src_w, tw, mode)
    return np.einsum("ih,cij,jw->chw", mh, g, mw)


def log_softmax(x: np.ndarray) -> np.ndarray:
    """Log-softmax over axis 0 (channels) with max subtraction."""
    shifted = x - x.max(axis=0, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))


def channel_softmax(x) -> FeatureMap:
    """Per-pixel softmax across channels."""
    a = _as_array(x)
    e = np.exp(a - a.max(axis=0, keepdims=True))
    return FeatureMap(e / e.sum(axis=0, keepdims=True))


def write_tensor(x, path) -> None:
    arr = _as_array(x)
    if arr.ndim != 3:
        raise ValueError(f"expected a C x H x W array, got shape {arr.shape}")
    with np.errstate(over="ignore"):
        payload = arr.astype("<f4")
    if not np.all(np.isfinite(payload)):
        raise ValueError("tensor has values that are non-finite in float32")
    c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, FORMAT_VERSION, DTYPE_F32, c, h, w))
        fh.write(payload.tobytes(order="C"))


def read_tensor(path) -> FeatureMap:
    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        raise TensorFormatError(f"{path}: file too short for header ({len(data)} bytes)")
    magic, version, dtype, c, h, w = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise TensorFormatError(f"{path}: unsupported dtype code {dtype}")
    if data[9:12] != b"\x00\x00\x00":
        raise TensorFormatError(f"{path}: reserved header bytes are not zero")
    if min(c, h, w) < 1:
        raise TensorFormatError(f"{path}: zero dimension in header ({c}x{h}x{w})")
    expected = HEADER.size + 4 * c * h * w
    if len(data) != expected:
        kind = "truncated" if len(data) < expected else "oversized"
        raise TensorFormatError(f"{path}: {kind} payload, expected {expected} bytes, got {len(data)}")
    arr = np.frombuffer(data, dtype="<f4", offset=HEADER.size).reshape(c, h, w)
    if not np.all(np.isfinite(arr)):
        raise TensorFormatError(f"{path}: payload contains non-finite values")
    return FeatureMap(arr.astype(np.float64))
