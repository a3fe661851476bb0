"""``rarespot`` command line: tile, stats, mine, contextmap, augment, eval, loss, gradcheck, synth.

Option values resolve as built-in defaults < config file section < flags.
Exit codes: 0 success, 1 validation error, 2 runtime or I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .tensor import FORMAT_VERSION

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger("rarespot")

CONFIG_SIDECAR = "run_config.json"
CLASS_ALIASES = {"pd": 0, "prairie_dog": 0, "prairiedog": 0, "burrow": 1}


class UsageError(Exception):
    """Bad arguments or configuration (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _pair(text):
    a, b = (float(v) for v in str(text).split(","))
    return a, b


def _dims(text):
    parts = [int(v) for v in str(text).lower().replace(",", "x").split("x")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("dims must look like CxHxW")
    return tuple(parts)


# key -> (flag type or None for config-only, default, help)
SECTIONS = {
    "tile": {
        "in": (str, None, "image file or manifest of images"),
        "ann": (str, None, "annotation file (single image) or directory/manifest of annotations"),
        "out": (str, "tiles", "output directory"),
        "size": (int, 512, "tile size in pixels"),
        "overlap": (int, 0, "tile overlap in pixels"),
        "visibility": (float, 0.4, "min visible area fraction for a clipped box to be kept"),
    },
    "stats": {
        "manifest": (str, None, "tile manifest"),
        "out": (str, "stats.json", "output JSON"),
        "default_size": (int, 512, "tile size assumed when an image file is absent"),
    },
    "mine": {
        "images": (str, None, "manifest of images"),
        "gts": (str, None, "directory or manifest of ground-truth annotation files"),
        "dets": (str, None, "directory or manifest of detection files"),
        "out": (str, "patches", "output patch directory"),
        "iou": (float, 0.5, "IoU threshold for a match"),
        "conf": (float, 0.25, "ignore detections below this confidence"),
        "pad": (int, 4, "context pixels around each crop"),
        "fp_mode": (str, "distractor", "keep FP patches as unlabeled distractors, or drop them"),
        "labeled": (int, 1, "also extract TP-matched ground-truth patches (1/0)"),
    },
    "contextmap": {
        "in": (str, None, "image file or manifest of images"),
        "out": (str, None, "label PNG path (single image) or output directory"),
        "hsv": (None, {}, "HSV threshold overrides"),
    },
    "augment": {
        "patch_dir": (str, None, "patch directory written by `mine`"),
        "backgrounds": (str, None, "manifest of background-only images"),
        "out": (str, "augmented", "output directory"),
        "num_images": (int, 1, "number of augmented images"),
        "patches_per_image": (int, 4, "patches pasted per image"),
        "fp_mode": (str, "distractor", "distractor or drop"),
        "equal_backgrounds": (None, True, "use as many backgrounds as patch-source images"),
        "dirt_fraction": (float, 0.9, "probability of targeting dirt rather than grass"),
        "max_attempts": (int, 50, "placement draws before giving up on a patch"),
        "min_separation_iou": (float, 0.0, "max IoU with already placed boxes"),
        "min_footprint": (float, 0.8, "footprint share that must carry the target habitat"),
        "scale_range": (_pair, (0.9, 1.1), "lo,hi"),
        "rotation_deg_range": (_pair, (-90.0, 90.0), "lo,hi degrees"),
        "brightness_delta_range": (_pair, (-0.1, 0.1), "lo,hi value-channel offset"),
        "contrast_gain_range": (_pair, (0.9, 1.1), "lo,hi value-channel gain"),
        "hsv": (None, {}, "HSV threshold overrides"),
    },
    "eval": {
        "dets": (str, None, "manifest (or directory) of detection files"),
        "gts": (str, None, "manifest (or directory) of ground-truth files"),
        "iou": (float, 0.5, "IoU threshold"),
        "conf": (float, 0.25, "confidence for the reported P/R operating point"),
        "classes": (str, "pd,burrow", "comma-separated class names or ids"),
        "ap_method": (str, "continuous", "continuous or 101"),
        "out": (str, "report.json", "output JSON (a .txt table is written beside it)"),
    },
    "loss": {
        "p3": (str, None, "p3 tensor file"),
        "p4": (str, None, "p4 tensor file"),
        "p5": (str, None, "p5 tensor file"),
        "alpha": (float, 1.0, "MSE weight"),
        "beta": (float, 1.0, "KL weight"),
        "gamma": (float, 1.0, "cosine weight"),
        "topology": (str, "literal", "literal, chain or anchor"),
        "upsample": (str, "nearest", "nearest or bilinear"),
        "kl_reverse": (int, 0, "swap KL argument order (1/0)"),
        "out": (str, "loss.json", "output JSON"),
        "grads_dir": (str, None, "write gradient tensors here"),
    },
    "gradcheck": {
        "op": (str, "combined", "mse, kl, cos or combined"),
        "dims": (_dims, (3, 4, 4), "CxHxW"),
        "step": (float, 1e-5, "finite-difference step"),
        "alpha": (float, 1.0, "MSE weight (combined)"),
        "beta": (float, 1.0, "KL weight (combined)"),
        "gamma": (float, 1.0, "cosine weight (combined)"),
        "topology": (str, "literal", "literal, chain or anchor"),
        "upsample": (str, "nearest", "nearest or bilinear"),
        "out": (str, None, "optional output JSON"),
    },
    "synth": {
        "out": (str, "synthetic", "output directory"),
        "num_images": (int, 20, "number of images"),
        "num_backgrounds": (int, 20, "number of background-only images"),
        "size": (int, 256, "image side in pixels"),
    },
}

REQUIRED = {
    "tile": ("in", "ann"), "stats": ("manifest",), "mine": ("images", "gts", "dets"),
    "contextmap": ("in", "out"), "augment": ("patch_dir", "backgrounds"), "eval": ("dets", "gts"),
    "loss": ("p3", "p4", "p5"),
}
TOP_LEVEL_KEYS = {"master_seed", "workers"}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rarespot", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version",
                        version=f"rarespot {__version__} (tensor format v{FORMAT_VERSION})")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, opts in SECTIONS.items():
        p = sub.add_parser(name, help=f"{name} subcommand")
        p.add_argument("--config", help="TOML config file with a [%s] section" % name)
        p.add_argument("--seed", dest="master_seed", type=int, default=argparse.SUPPRESS, help="master seed")
        p.add_argument("--workers", type=int, default=argparse.SUPPRESS, help="worker processes")
        p.add_argument("--log-level", default="WARNING")
        for key, (typ, _default, help_) in opts.items():
            if typ is None:
                continue
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=argparse.SUPPRESS, help=help_)
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags; reject unknown config keys."""
    opts = SECTIONS[command]
    values = {k: v[1] for k, v in opts.items()}
    top = {"master_seed": 0, "workers": 1}
    if args.config:
        try:
            with open(args.config, "rb") as fh:
                cfg = tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise UsageError(f"cannot parse config {args.config}: {e}") from None
        for key, val in cfg.items():
            if key in TOP_LEVEL_KEYS:
                top[key] = val
            elif key in SECTIONS:
                if key != command:
                    continue
                unknown = set(val) - set(opts)
                if unknown:
                    raise UsageError(f"unknown keys in [{key}]: {sorted(unknown)}")
                for k, v in val.items():
                    values[k] = tuple(v) if isinstance(v, list) else v
            else:
                raise UsageError(f"unknown config key or section {key!r}")
    ns = vars(args)
    for k in opts:
        if k in ns:
            values[k] = ns[k]
    for k in TOP_LEVEL_KEYS:
        if k in ns:
            top[k] = ns[k]
    missing = [k for k in REQUIRED.get(command, ()) if values.get(k) is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    values.update(top)
    return values


def _write_sidecar(path: Path, command: str, values: dict) -> None:
    # workers does not affect outputs, so it stays out of the replay record
    record = {"command": command, "version": __version__}
    record.update({k: (list(v) if isinstance(v, tuple) else v) for k, v in values.items() if k != "workers"})
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _parallel_map(fn, items, workers):
    items = list(items)
    if workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _class_ids(text) -> list[int]:
    out = []
    for tok in str(text).split(","):
        tok = tok.strip().lower()
        if tok.isdigit():
            out.append(int(tok))
        elif tok in CLASS_ALIASES:
            out.append(CLASS_ALIASES[tok])
        else:
            raise UsageError(f"unknown class {tok!r}")
    return out


# --- subcommands ---------------------------------------------------------------

def _tile_one(job):
    from .annotations import TileSpec, read_annotations, tile_image, write_annotations
    from .imageio import read_image, write_image

    img_path, ann_path, out_dir, size, overlap, vis = job
    image = read_image(img_path)
    h, w = image.shape[:2]
    anns = read_annotations(ann_path, w, h) if ann_path else []
    written = []
    for tile, tanns, (x0, y0) in tile_image(image, anns, TileSpec(size, overlap, vis)):
        stem = f"{Path(img_path).stem}_{x0}_{y0}"
        write_image(Path(out_dir) / f"{stem}.png", tile)
        write_annotations(Path(out_dir) / f"{stem}.txt", tanns, size, size)
        written.append(f"{stem}.png")
    return written


def cmd_tile(v):
    from .imageio import index_by_stem, read_manifest

    out = Path(v["out"])
    out.mkdir(parents=True, exist_ok=True)
    src = Path(v["in"])
    if src.suffix.lower() == ".txt":
        images = read_manifest(src)
        anns = index_by_stem(v["ann"])
        jobs = [(p, anns.get(p.stem), out, v["size"], v["overlap"], v["visibility"]) for p in images]
        for p in images:
            if p.stem not in anns:
                log.warning("no annotation file for %s; tiling without boxes", p)
    else:
        jobs = [(src, Path(v["ann"]), out, v["size"], v["overlap"], v["visibility"])]
    names = [n for batch in _parallel_map(_tile_one, jobs, v["workers"]) for n in batch]
    (out / "manifest.txt").write_text("".join(n + "\n" for n in names))
    _write_sidecar(out / CONFIG_SIDECAR, "tile", v)
    print(f"{len(names)} tiles written to {out}")


def cmd_stats(v):
    from .annotations import dataset_stats_from_manifest

    size = v["default_size"]
    report = dataset_stats_from_manifest(v["manifest"], default_size=(size, size))
    out = Path(v["out"])
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _write_sidecar(out.with_name(out.stem + ".config.json"), "stats", v)
    print(json.dumps({k: report[k] for k in ("num_tiles", "classes")}, indent=2))


def _mine_one(job):
    from .annotations import read_annotations, read_detections
    from .imageio import read_image
    from .mining import extract_patches, match

    img_path, gt_path, det_path, v = job
    image = read_image(img_path)
    h, w = image.shape[:2]
    gts = read_annotations(gt_path, w, h) if gt_path else []
    dets = [d for d in (read_detections(det_path, w, h) if det_path else []) if d.confidence >= v["conf"]]
    result = match(dets, gts, v["iou"])
    patches = extract_patches(image, result, pad=v["pad"], source_image=Path(img_path).name,
                              include_labeled=bool(v["labeled"]), include_fp=v["fp_mode"] != "drop")
    counts = {"tp": len(result.tp), "fp": len(result.fp), "fn": len(result.fn)}
    return patches, counts


def cmd_mine(v):
    from .imageio import index_by_stem, read_manifest
    from .mining import save_patches

    if v["fp_mode"] not in ("distractor", "drop"):
        raise UsageError("--fp-mode must be distractor or drop")
    images = read_manifest(v["images"])
    gts, dets = index_by_stem(v["gts"]), index_by_stem(v["dets"])
    jobs = [(p, gts.get(p.stem), dets.get(p.stem), v) for p in images]
    results = _parallel_map(_mine_one, jobs, v["workers"])
    patches = [p for batch, _ in results for p in batch]
    totals = {k: sum(c[k] for _, c in results) for k in ("tp", "fp", "fn")}
    out = Path(v["out"])
    save_patches(patches, out)
    (out / "mine_report.json").write_text(json.dumps({"images": len(images), **totals, "patches": len(patches)},
                                                     indent=2, sort_keys=True) + "\n")
    _write_sidecar(out / CONFIG_SIDECAR, "mine", v)
    print(f"{len(patches)} patches ({totals}) written to {out}")


def cmd_contextmap(v):
    from .context import HSVThresholds, build_context_map, save_context_map
    from .imageio import read_image, read_manifest

    thresholds = HSVThresholds.from_dict(v["hsv"])
    src = Path(v["in"])
    if src.suffix.lower() == ".txt":
        out = Path(v["out"])
        out.mkdir(parents=True, exist_ok=True)
        for p in read_manifest(src):
            save_context_map(build_context_map(read_image(p), thresholds), out / f"{p.stem}_context.png")
        _write_sidecar(out / CONFIG_SIDECAR, "contextmap", v)
    else:
        out = Path(v["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        save_context_map(build_context_map(read_image(src), thresholds), out)
        _write_sidecar(out.with_name(out.stem + ".config.json"), "contextmap", v)
    print(f"context map(s) written to {out}")


def cmd_augment(v):
    from .augment import AugmentConfig, run_augment

    cfg_keys = {k: v[k] for k in SECTIONS["augment"] if k != "out"}
    cfg_keys["master_seed"] = v["master_seed"]
    cfg = AugmentConfig.from_dict(cfg_keys)
    out = Path(v["out"])
    report = run_augment(cfg, out, workers=v["workers"])
    _write_sidecar(out / CONFIG_SIDECAR, "augment", v)
    print(f"{report['num_images']} images, {report['placed']} placed, {report['skipped']} skipped -> {out}")


def _load_eval_side(source, kind):
    from .annotations import read_annotations, read_detections
    from .imageio import index_by_stem

    files = index_by_stem(source)
    reader = read_detections if kind == "dets" else read_annotations
    # IoU is invariant to per-axis scaling, so normalized coordinates suffice
    return {stem: reader(path, 1.0, 1.0) for stem, path in files.items() if path.exists()}, files


def cmd_eval(v):
    from .evaluation import evaluate, format_table

    if v["ap_method"] not in ("continuous", "101"):
        raise UsageError("--ap-method must be continuous or 101")
    dets, det_files = _load_eval_side(v["dets"], "dets")
    gts, gt_files = _load_eval_side(v["gts"], "gts")
    unmatched = sorted(set(det_files) ^ set(gt_files))
    missing = sorted(str(p) for p in list(det_files.values()) + list(gt_files.values()) if not p.exists())
    gts = {k: gts[k] for k in sorted(gts)}
    report = evaluate(dets, gts, _class_ids(v["classes"]), v["iou"], v["conf"], v["ap_method"])
    report["unmatched_entries"] = unmatched
    report["missing_files"] = missing
    if unmatched:
        log.warning("%d manifest entries have no counterpart: %s", len(unmatched), unmatched[:5])
    out = Path(v["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    table = format_table(report)
    out.with_suffix(".txt").write_text(table)
    _write_sidecar(out.with_name(out.stem + ".config.json"), "eval", v)
    print(table, end="")


def cmd_loss(v):
    from .losses import LossWeights, PairingTopology, consistency_loss
    from .tensor import PyramidSet, read_tensor, write_tensor

    pyr = PyramidSet(read_tensor(v["p3"]), read_tensor(v["p4"]), read_tensor(v["p5"]))
    rep = consistency_loss(pyr, LossWeights(v["alpha"], v["beta"], v["gamma"]),
                           PairingTopology.preset(v["topology"]), v["upsample"], bool(v["kl_reverse"]))
    out = Path(v["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(rep.as_dict(), indent=2) + "\n")
    if v["grads_dir"]:
        gdir = Path(v["grads_dir"])
        gdir.mkdir(parents=True, exist_ok=True)
        for term, per_level in rep.grads.items():
            for lvl, g in per_level.items():
                write_tensor(g, gdir / f"grad_{term}_{lvl}.rspt")
    _write_sidecar(out.with_name(out.stem + ".config.json"), "loss", v)
    print(json.dumps(rep.as_dict()))


def cmd_gradcheck(v):
    from .losses import LossWeights, PairingTopology, gradcheck

    rep = gradcheck(v["op"], v["dims"], v["master_seed"], v["step"], LossWeights(v["alpha"], v["beta"], v["gamma"]),
                    PairingTopology.preset(v["topology"]), v["upsample"])
    text = json.dumps(rep, indent=2)
    if v["out"]:
        Path(v["out"]).write_text(text + "\n")
    print(text)
    return 0 if rep["passed"] else 1


def cmd_synth(v):
    from .synthetic import make_dataset

    info = make_dataset(v["out"], v["num_images"], v["size"], v["num_backgrounds"], v["master_seed"])
    _write_sidecar(Path(v["out"]) / CONFIG_SIDECAR, "synth", v)
    print(f"synthetic dataset: {info} -> {v['out']}")


COMMANDS = {
    "tile": cmd_tile, "stats": cmd_stats, "mine": cmd_mine, "contextmap": cmd_contextmap,
    "augment": cmd_augment, "eval": cmd_eval, "loss": cmd_loss, "gradcheck": cmd_gradcheck, "synth": cmd_synth,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        values = resolve(args.command, args)
        if values["workers"] < 1:
            raise UsageError("--workers must be >= 1")
        code = COMMANDS[args.command](values)
        return int(code or 0)
    except UsageError as e:
        print(f"rarespot {args.command}: {e}", file=sys.stderr)
        return 1
    except (OSError, RuntimeError) as e:
        print(f"rarespot {args.command}: {e}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, TypeError) as e:
        print(f"rarespot {args.command}: invalid input: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
