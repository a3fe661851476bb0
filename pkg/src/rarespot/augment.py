"""Context-aware hard-sample augmentation.

Patches (mined FPs, FNs and labeled objects) are scaled, rotated and
re-lit, dropped onto dirt or grass regions of an empty background picked
from its HSV context map, and Poisson-blended in.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .annotations import Annotation, BBox, round_half_up, write_annotations
from .context import DIRT, GRASS, LABEL_NAMES, ContextMap, HSVThresholds, build_context_map, hsv_to_rgb, rgb_to_hsv
from .mining import Patch, iou, load_patches
from .poisson import default_mask, poisson_blend

log = logging.getLogger(__name__)

MIN_PATCH_SIDE = 4


@dataclass(frozen=True)
class ThetaRanges:
    scale: tuple[float, float] = (0.9, 1.1)
    rotation_deg: tuple[float, float] = (-90.0, 90.0)
    brightness_delta: tuple[float, float] = (-0.1, 0.1)
    contrast_gain: tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        for f in fields(self):
            lo, hi = getattr(self, f.name)
            if not lo <= hi:
                raise ValueError(f"{f.name} range must satisfy low <= high, got {(lo, hi)}")
            object.__setattr__(self, f.name, (float(lo), float(hi)))


@dataclass(frozen=True)
class AugmentParams:
    scale: float = 1.0
    rotation_deg: float = 0.0
    brightness_delta: float = 0.0
    contrast_gain: float = 1.0
    seed: int = 0

    def check(self, ranges: ThetaRanges = ThetaRanges()) -> None:
        for name in ("scale", "rotation_deg", "brightness_delta", "contrast_gain"):
            lo, hi = getattr(ranges, name)
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise ValueError(f"{name}={v} outside [{lo}, {hi}]")

    @classmethod
    def from_seed(cls, seed: int, ranges: ThetaRanges = ThetaRanges()) -> "AugmentParams":
        rng = np.random.default_rng(seed)
        return cls(
            scale=float(rng.uniform(*ranges.scale)),
            rotation_deg=float(rng.uniform(*ranges.rotation_deg)),
            brightness_delta=float(rng.uniform(*ranges.brightness_delta)),
            contrast_gain=float(rng.uniform(*ranges.contrast_gain)),
            seed=int(seed),
        )


def sample_params(rng: np.random.Generator, ranges: ThetaRanges = ThetaRanges()) -> AugmentParams:
    """Draw a per-patch seed from ``rng`` and expand it into a parameter set."""
    return AugmentParams.from_seed(int(rng.integers(0, 2**63)), ranges)


@dataclass(frozen=True)
class PlacementPolicy:
    dirt_fraction: float = 0.9
    max_attempts: int = 50
    min_separation_iou: float = 0.0
    min_footprint: float = 0.8  # share of the footprint that must carry the target label

    def __post_init__(self):
        if not 0.0 <= self.dirt_fraction <= 1.0:
            raise ValueError(f"dirt_fraction must be in [0, 1], got {self.dirt_fraction}")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")


@dataclass(frozen=True)
class Placement:
    bbox: BBox
    label: int  # DIRT or GRASS


def _adjust_value(pixels: np.ndarray, gain: float, delta: float) -> np.ndarray:
    hsv = rgb_to_hsv(pixels)
    v = hsv[..., 2].astype(np.float64)
    hsv[..., 2] = np.clip(gain * (v - 0.5) + 0.5 + delta, 0.0, 1.0)
    return np.clip(np.rint(hsv_to_rgb(hsv).astype(np.float64) * 255.0), 0, 255).astype(np.uint8)


def _rotation(deg: float):
    t = math.radians(deg)
    c, s = math.cos(t), math.sin(t)
    if deg % 90 == 0:
        c, s = round(c), round(s)
    return c, s


def _forward_box(box: BBox, sx, sy, c, s, in_wh, out_wh):
    """Map a box through scale + rotation about the center and take its AABB."""
    (ws, hs), (wo, ho) = in_wh, out_wh
    xs, ys = [], []
    for x, y in ((box.x_min, box.y_min), (box.x_max, box.y_min), (box.x_min, box.y_max), (box.x_max, box.y_max)):
        dx, dy = x * sx - ws / 2, y * sy - hs / 2
        xs.append(dx * c + dy * s + wo / 2)
        ys.append(-dx * s + dy * c + ho / 2)
    x0, x1 = max(0.0, min(xs)), min(float(wo), max(xs))
    y0, y1 = max(0.0, min(ys)), min(float(ho), max(ys))
    return BBox(x0, y0, x1, y1)


def transform_patch(p: Patch, theta: AugmentParams, exact_quarter_turns: bool = True) -> Patch:
    """Scale, rotate about the center, then adjust brightness/contrast.

    Rotation is counter-clockwise as displayed for positive angles. The
    output is the axis-aligned bounding box of the rotated patch, with a
    validity mask marking pixels that came from inside the source. Multiples
    of 90 degrees at unit scale are done by exact array rotation.
    """
    h, w = p.height, p.width
    hs, ws = round_half_up(h * theta.scale), round_half_up(w * theta.scale)
    c, s = _rotation(theta.rotation_deg)
    wo = round_half_up(ws * abs(c) + hs * abs(s))
    ho = round_half_up(ws * abs(s) + hs * abs(c))
    if min(wo, ho, ws, hs) < MIN_PATCH_SIDE:
        raise ValueError(f"transformed patch {ho}x{wo} smaller than {MIN_PATCH_SIDE}x{MIN_PATCH_SIDE}")

    quarter = theta.rotation_deg % 90 == 0
    if quarter and exact_quarter_turns and (hs, ws) == (h, w):
        k = int(theta.rotation_deg // 90) % 4
        pixels = np.ascontiguousarray(np.rot90(p.pixels, k))
        mask = np.ascontiguousarray(np.rot90(p.mask, k))
    else:
        # inverse-map output pixel centers to source pixel index coordinates
        rows, cols = np.mgrid[0:ho, 0:wo].astype(np.float64)
        px, py = cols + 0.5 - wo / 2, rows + 0.5 - ho / 2
        qx = px * c - py * s + ws / 2
        qy = px * s + py * c + hs / 2
        src_c = qx * (w / ws) - 0.5
        src_r = qy * (h / hs) - 0.5
        eps = 1e-9
        inside = (src_c >= -0.5 - eps) & (src_c <= w - 0.5 + eps) & (src_r >= -0.5 - eps) & (src_r <= h - 0.5 + eps)
        src_mask = ndimage.map_coordinates(p.mask.astype(np.float64), [src_r, src_c], order=0, mode="nearest")
        mask = inside & (src_mask > 0.5)
        chans = [
            ndimage.map_coordinates(p.pixels[..., ch].astype(np.float64), [src_r, src_c], order=1, mode="nearest")
            for ch in range(p.pixels.shape[2])
        ]
        pixels = np.clip(np.rint(np.stack(chans, axis=-1)), 0, 255).astype(np.uint8)
        pixels[~mask] = 0

    if theta.brightness_delta != 0.0 or theta.contrast_gain != 1.0:
        pixels = _adjust_value(pixels, theta.contrast_gain, theta.brightness_delta)
        pixels[~mask] = 0

    box = _forward_box(p.object_box, ws / w, hs / h, c, s, (ws, hs), (wo, ho))
    return replace(p, pixels=pixels, mask=mask, object_box=box)


def candidate_positions(cmap: ContextMap, patch_hw, label: int, min_footprint: float, margin: int = 1):
    """Top-left (row, col) positions whose patch footprint is mostly ``label``.

    A ``margin``-pixel border is kept free for the blend boundary.
    """
    h, w = patch_hw
    H, W = cmap.labels.shape
    if h + 2 * margin > H or w + 2 * margin > W:
        return np.empty((0, 2), dtype=int)
    integral = np.zeros((H + 1, W + 1), dtype=np.int64)
    integral[1:, 1:] = np.cumsum(np.cumsum(cmap.labels == label, axis=0), axis=1)
    ys = np.arange(margin, H - h - margin + 1)
    xs = np.arange(margin, W - w - margin + 1)
    y0, x0 = ys[:, None], xs[None, :]
    counts = integral[y0 + h, x0 + w] - integral[y0, x0 + w] - integral[y0 + h, x0] + integral[y0, x0]
    ok = counts >= min_footprint * h * w
    r, cidx = np.nonzero(ok)
    return np.stack([ys[r], xs[cidx]], axis=1)


def sample_placement(cmap: ContextMap, patch_hw, policy: PlacementPolicy, occupied, rng: np.random.Generator,
                     margin: int = 1) -> Placement | None:
    """Pick a habitat (dirt with ``policy.dirt_fraction``, else grass) and a spot in it.

    Returns ``None`` when no acceptable spot turns up within
    ``policy.max_attempts`` draws.
    """
    label = DIRT if rng.random() < policy.dirt_fraction else GRASS
    cands = candidate_positions(cmap, patch_hw, label, policy.min_footprint, margin)
    if len(cands) == 0:
        return None
    h, w = patch_hw
    for _ in range(policy.max_attempts):
        y, x = cands[rng.integers(len(cands))]
        box = BBox(float(x), float(y), float(x + w), float(y + h))
        if all(iou(box, o) <= policy.min_separation_iou for o in occupied):
            return Placement(box, label)
    return None


@dataclass
class AugmentResult:
    image: np.ndarray
    annotations: list
    placements: list = field(default_factory=list)
    skips: list = field(default_factory=list)


def augment_image(image: np.ndarray, patches, cmap: ContextMap, policy: PlacementPolicy = PlacementPolicy(),
                  rng: np.random.Generator | None = None, ranges: ThetaRanges = ThetaRanges()) -> AugmentResult:
    """Paste each patch into a context-appropriate spot of ``image``.

    FN and labeled patches produce an annotation at the placed object box;
    FP patches are pasted without one.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    out = image.copy()
    occupied, anns, placements, skips = [], [], [], []
    for k, p in enumerate(patches):
        theta = sample_params(rng, ranges)
        try:
            t = transform_patch(p, theta)
        except ValueError as e:
            skips.append({"patch": k, "reason": "too_small", "detail": str(e)})
            continue
        pl = sample_placement(cmap, (t.height, t.width), policy, occupied, rng)
        if pl is None:
            skips.append({"patch": k, "reason": "no_placement"})
            continue
        mask = default_mask(t.pixels.shape, valid=t.mask)
        if not mask.any():
            skips.append({"patch": k, "reason": "empty_mask"})
            continue
        y, x = int(pl.bbox.y_min), int(pl.bbox.x_min)
        out = poisson_blend(out, t.pixels, (y, x), mask)
        occupied.append(pl.bbox)
        record = {
            "patch": k,
            "origin": p.origin,
            "class_id": p.class_id,
            "label": LABEL_NAMES[pl.label],
            "patch_box": pl.bbox.as_list(),
            "theta": asdict(theta),
        }
        if p.annotated:
            obj = t.object_box.translate(x, y)
            anns.append(Annotation(obj, p.class_id, source="synthetic"))
            record["object_box"] = obj.as_list()
        placements.append(record)
    return AugmentResult(out, anns, placements, skips)


@dataclass(frozen=True)
class AugmentConfig:
    patch_dir: str
    backgrounds: str
    num_images: int = 1
    patches_per_image: int = 4
    master_seed: int = 0
    fp_mode: str = "distractor"  # or "drop"
    equal_backgrounds: bool = True
    policy: PlacementPolicy = PlacementPolicy()
    ranges: ThetaRanges = ThetaRanges()
    thresholds: HSVThresholds = HSVThresholds()

    def __post_init__(self):
        if self.fp_mode not in ("distractor", "drop"):
            raise ValueError(f"fp_mode must be 'distractor' or 'drop', got {self.fp_mode!r}")
        if self.num_images < 0 or self.patches_per_image < 0:
            raise ValueError("num_images and patches_per_image must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        """Build from a flat key/value mapping (as found in a config file section)."""
        d = dict(d)
        policy_keys = {f.name for f in fields(PlacementPolicy)}
        range_keys = {f"{f.name}_range": f.name for f in fields(ThetaRanges)}
        top_keys = {f.name for f in fields(cls)} - {"policy", "ranges", "thresholds"}
        policy = {k: d.pop(k) for k in list(d) if k in policy_keys}
        ranges = {range_keys[k]: tuple(d.pop(k)) for k in list(d) if k in range_keys}
        hsv = d.pop("hsv", {})
        unknown = set(d) - top_keys
        if unknown:
            raise ValueError(f"unknown augment keys: {sorted(unknown)}")
        return cls(policy=PlacementPolicy(**policy), ranges=ThetaRanges(**ranges),
                   thresholds=HSVThresholds.from_dict(hsv), **d)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("policy", "ranges", "thresholds")}
        d.update(asdict(self.policy))
        d.update({f"{k}_range": list(v) for k, v in asdict(self.ranges).items()})
        d["hsv"] = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.thresholds).items()}
        return d


def select_backgrounds(n_backgrounds: int, n_needed: int, seed: int, equal: bool = True):
    """Indices of backgrounds to use: ``n_needed`` distinct ones when available,
    otherwise drawn with replacement."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6267]))
    if not equal or n_needed <= 0:
        return list(range(n_backgrounds)), False
    replace_ = n_needed > n_backgrounds
    if replace_:
        log.warning("only %d background images for %d patch-source images; sampling with replacement",
                    n_backgrounds, n_needed)
    return [int(i) for i in rng.choice(n_backgrounds, n_needed, replace=replace_)], replace_


# worker state for the process pool; set by _init_worker
_STATE: dict = {}


def _init_worker(state):
    _STATE.clear()
    _STATE.update(state)


def _augment_one(k: int) -> dict:
    from .imageio import read_image, write_image

    cfg: AugmentConfig = _STATE["cfg"]
    patches = _STATE["patches"]
    bg_paths = _STATE["bg_paths"]
    chosen = _STATE["chosen"]
    out_dir = Path(_STATE["out_dir"])

    rng = np.random.default_rng(np.random.SeedSequence([cfg.master_seed, k]))
    bg_idx = chosen[k % len(chosen)]
    image = read_image(bg_paths[bg_idx])
    cmap = build_context_map(image, cfg.thresholds)
    n = min(cfg.patches_per_image, len(patches))
    picks = [int(i) for i in rng.choice(len(patches), n, replace=False)] if n else []
    res = augment_image(image, [patches[i] for i in picks], cmap, cfg.policy, rng, cfg.ranges)
    for rec in res.placements:
        rec["patch"] = picks[rec["patch"]]
    for rec in res.skips:
        rec["patch"] = picks[rec["patch"]]

    name = f"aug_{k:05d}"
    h, w = image.shape[:2]
    write_image(out_dir / f"{name}.png", res.image)
    write_annotations(out_dir / f"{name}.txt", res.annotations, w, h)
    return {
        "image": f"{name}.png",
        "background": bg_paths[bg_idx].name,
        "placements": res.placements,
        "skips": res.skips,
        "annotations": len(res.annotations),
    }


def run_augment(cfg: AugmentConfig, out_dir, workers: int = 1) -> dict:
    """Generate ``cfg.num_images`` augmented images plus annotations and a run report.

    Image ``k`` draws all randomness from ``SeedSequence([master_seed, k])``,
    so output does not depend on ``workers``.
    """
    from .imageio import read_manifest, write_manifest

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    patches = load_patches(cfg.patch_dir)
    if cfg.fp_mode == "drop":
        patches = [p for p in patches if p.origin != "fp"]
    bg_paths = read_manifest(cfg.backgrounds)
    if not bg_paths:
        raise ValueError(f"background manifest {cfg.backgrounds} is empty")
    n_sources = len({p.source_image for p in patches})
    chosen, with_replacement = select_backgrounds(len(bg_paths), n_sources, cfg.master_seed, cfg.equal_backgrounds)

    state = {"cfg": cfg, "patches": patches, "bg_paths": bg_paths, "chosen": chosen, "out_dir": str(out_dir)}
    indices = range(cfg.num_images)
    if workers > 1 and cfg.num_images > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(state,)) as pool:
            records = list(pool.map(_augment_one, indices, chunksize=max(1, cfg.num_images // (4 * workers))))
    else:
        _init_worker(state)
        records = [_augment_one(k) for k in indices]

    write_manifest(out_dir / "manifest.txt", [out_dir / r["image"] for r in records])
    per_label = {"dirt": 0, "grass": 0}
    per_origin = {"labeled": 0, "fp": 0, "fn": 0}
    for r in records:
        for p in r["placements"]:
            per_label[p["label"]] += 1
            per_origin[p["origin"]] += 1
    report = {
        "num_images": len(records),
        "num_patches": len(patches),
        "patch_source_images": n_sources,
        "backgrounds_used": sorted({bg_paths[i].name for i in chosen}),
        "backgrounds_with_replacement": with_replacement,
        "placed": sum(len(r["placements"]) for r in records),
        "skipped": sum(len(r["skips"]) for r in records),
        "annotations": sum(r["annotations"] for r in records),
        "per_label": per_label,
        "per_origin": per_origin,
        "images": records,
    }
    (out_dir / "augment_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report
