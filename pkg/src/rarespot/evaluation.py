"""Precision, recall and AP@50 / mAP@50 for box detections."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .annotations import CLASS_NAMES
from .mining import iou


@dataclass
class PRCurve:
    """Cumulative precision/recall at each distinct confidence threshold.

    ``thresholds``, ``precision`` and ``recall`` have one entry per distinct
    confidence (descending). ``tp`` flags every detection in processing order.
    """

    class_id: int
    num_gt: int
    thresholds: np.ndarray = field(default_factory=lambda: np.empty(0))
    precision: np.ndarray = field(default_factory=lambda: np.empty(0))
    recall: np.ndarray = field(default_factory=lambda: np.empty(0))
    tp: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=bool))

    @property
    def num_det(self) -> int:
        return len(self.tp)

    @property
    def no_gt(self) -> bool:
        return self.num_gt == 0

    def points(self):
        return list(zip(self.precision.tolist(), self.recall.tolist()))


def _as_image_dict(x):
    if isinstance(x, dict):
        return x
    return dict(enumerate(x))


def match_flags(dets, gts, class_id, iou_thresh=0.5):
    """Flag each detection of ``class_id`` as TP or FP, over all images.

    Detections are processed in globally descending confidence (ties broken
    by image order, then detection index); each claims the unmatched GT of
    its image with the highest IoU at or above ``iou_thresh``.

    Returns ``(confidences, is_tp, num_gt)`` in processing order.
    """
    dets, gts = _as_image_dict(dets), _as_image_dict(gts)
    keys = list(dict.fromkeys(list(gts) + list(dets)))
    pool = []
    for order, key in enumerate(keys):
        for i, d in enumerate(dets.get(key, [])):
            if d.class_id == class_id:
                pool.append((-d.confidence, order, i, key, d))
    pool.sort(key=lambda t: t[:3])
    gt_cls = {k: [g for g in gts.get(k, []) if g.class_id == class_id] for k in keys}
    taken = {k: [False] * len(v) for k, v in gt_cls.items()}
    conf, flags = [], []
    for _, _, _, key, d in pool:
        best, best_iou = -1, -1.0
        for j, g in enumerate(gt_cls[key]):
            if taken[key][j]:
                continue
            v = iou(d.bbox, g.bbox)
            if v >= iou_thresh and v > best_iou:
                best, best_iou = j, v
        if best >= 0:
            taken[key][best] = True
        conf.append(d.confidence)
        flags.append(best >= 0)
    num_gt = sum(len(v) for v in gt_cls.values())
    return np.asarray(conf, dtype=np.float64), np.asarray(flags, dtype=bool), num_gt


def pr_curve(dets, gts, class_id: int, iou_thresh: float = 0.5) -> PRCurve:
    """Cumulative precision/recall, one point per distinct confidence.

    Detections sharing a confidence enter the curve together, so the result
    does not depend on how ties are ordered. ``dets`` and ``gts`` map image
    id -> list of detections / annotations (plain lists are keyed by
    position). With no GT for the class, recall is undefined and the curve
    is returned with ``num_gt == 0``.
    """
    conf, flags, num_gt = match_flags(dets, gts, class_id, iou_thresh)
    if len(conf) == 0:
        return PRCurve(class_id, num_gt)
    # last index of each run of equal confidences
    ends = np.flatnonzero(np.append(conf[1:] != conf[:-1], True))
    tp = np.cumsum(flags)[ends]
    n = ends + 1
    precision = tp / n
    recall = tp / num_gt if num_gt else np.zeros(len(ends))
    return PRCurve(class_id, num_gt, conf[ends], precision, recall, flags)


def average_precision(curve: PRCurve, method: str = "continuous") -> float:
    """Area under the monotone precision envelope.

    ``continuous`` integrates over every recall step; ``101`` averages the
    envelope at 101 evenly spaced recall levels.
    """
    if curve.num_gt == 0 or len(curve.recall) == 0:
        return 0.0
    r = np.concatenate([[0.0], curve.recall])
    p = np.concatenate([[0.0], curve.precision])
    env = np.maximum.accumulate(p[::-1])[::-1]
    if method == "continuous":
        return float(np.sum((r[1:] - r[:-1]) * env[1:]))
    if method == "101":
        levels = np.linspace(0.0, 1.0, 101)
        idx = np.searchsorted(curve.recall, levels, side="left")
        vals = np.where(idx < len(curve.recall), env[1:][np.minimum(idx, len(curve.recall) - 1)], 0.0)
        return float(vals.mean())
    raise ValueError(f"unknown AP method {method!r}; expected 'continuous' or '101'")


def operating_point(dets, gts, class_id, conf_thresh=0.25, iou_thresh=0.5):
    """Precision and recall counting only detections with confidence >= ``conf_thresh``."""
    conf, flags, num_gt = match_flags(dets, gts, class_id, iou_thresh)
    keep = conf >= conf_thresh
    tp = int(flags[keep].sum())
    n = int(keep.sum())
    precision = tp / n if n else 0.0
    recall = tp / num_gt if num_gt else 0.0
    return {"precision": precision, "recall": recall, "tp": tp, "fp": n - tp, "fn": num_gt - tp}


def evaluate(dets, gts, classes=None, iou_thresh: float = 0.5, conf_thresh: float = 0.25,
             ap_method: str = "continuous") -> dict:
    """Per-class P/R at ``conf_thresh``, AP@``iou_thresh`` and their class mean."""
    classes = sorted(CLASS_NAMES) if classes is None else list(classes)
    per_class = {}
    for c in classes:
        curve = pr_curve(dets, gts, c, iou_thresh)
        op = operating_point(dets, gts, c, conf_thresh, iou_thresh)
        per_class[str(c)] = {
            "name": CLASS_NAMES.get(c, str(c)),
            "num_gt": curve.num_gt,
            "num_det": curve.num_det,
            "ap": average_precision(curve, ap_method),
            "no_gt": curve.no_gt,
            **op,
        }
    aps = [v["ap"] for v in per_class.values()]
    return {
        "iou_thresh": iou_thresh,
        "conf_thresh": conf_thresh,
        "ap_method": ap_method,
        "classes": per_class,
        "map": float(np.mean(aps)) if aps else 0.0,
    }


def format_table(report: dict) -> str:
    rows = [("class", "P", "R", f"AP@{round(report['iou_thresh'] * 100)}", "GT", "dets")]
    for v in report["classes"].values():
        rows.append((v["name"], f"{v['precision']:.3f}", f"{v['recall']:.3f}", f"{v['ap']:.3f}",
                     str(v["num_gt"]), str(v["num_det"])))
    rows.append(("all", "", "", f"{report['map']:.3f}", "", ""))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.rjust(wd) if i else cell.ljust(wd) for i, (cell, wd) in enumerate(zip(r, widths)))
             for r in rows]
    return "\n".join(lines) + "\n"
