import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rarespot.annotations import BBox, read_annotations
from rarespot.augment import (
    AugmentConfig,
    AugmentParams,
    PlacementPolicy,
    ThetaRanges,
    augment_image,
    candidate_positions,
    run_augment,
    sample_params,
    sample_placement,
    select_backgrounds,
    transform_patch,
)
from rarespot.context import DIRT, GRASS, OTHER, ContextMap, HSVThresholds
from rarespot.imageio import write_image, write_manifest
from rarespot.mining import Patch, iou, save_patches


def make_patch(h=40, w=40, origin="fn", seed=0, object_box=None):
    rng = np.random.default_rng(seed)
    pixels = rng.integers(30, 220, (h, w, 3), dtype=np.uint8)
    m = min(4, h // 4, w // 4)
    box = BBox(m, m, w - m, h - m) if object_box is None else object_box
    return Patch(pixels, origin, 0 if origin != "fp" else 1, "src.png", BBox(0, 0, w, h), box)


def label_map(labels):
    return ContextMap(np.asarray(labels, np.uint8), HSVThresholds())


class TestTransform:
    def test_identity(self):
        p = make_patch(37, 23)
        t = transform_patch(p, AugmentParams())
        np.testing.assert_array_equal(t.pixels, p.pixels)
        assert t.object_box == p.object_box and t.mask.all()

    def test_quarter_turn_four_times(self):
        p = make_patch(30, 30)
        t = p
        for _ in range(4):
            t = transform_patch(t, AugmentParams(rotation_deg=90))
            assert t.pixels.shape == (30, 30, 3)
        np.testing.assert_array_equal(t.pixels, p.pixels)
        assert t.object_box == p.object_box

    def test_general_path_quarter_turn(self):
        p = make_patch(30, 30)
        t = transform_patch(p, AugmentParams(rotation_deg=90), exact_quarter_turns=False)
        ref = np.rot90(p.pixels, 1)
        assert t.pixels.shape == ref.shape
        assert np.max(np.abs(t.pixels.astype(int) - ref.astype(int))) <= 2

    def test_quarter_turn_rectangular_box(self):
        p = make_patch(20, 30, object_box=BBox(2, 3, 10, 8))
        t = transform_patch(p, AugmentParams(rotation_deg=90))
        assert t.pixels.shape == (30, 20, 3)
        # counter-clockwise: column x maps to row w - x, row y maps to column y
        assert t.object_box == BBox(3, 20, 8, 28)
        np.testing.assert_array_equal(t.pixels, np.rot90(p.pixels))

    def test_scale_rounding(self):
        t = transform_patch(make_patch(40, 40), AugmentParams(scale=1.1))
        assert t.pixels.shape == (44, 44, 3)
        t = transform_patch(make_patch(5, 5), AugmentParams(scale=0.9))
        assert t.pixels.shape == (5, 5, 3)  # 4.5 rounds half up

    def test_rotated_aabb_and_mask(self):
        t = transform_patch(make_patch(40, 40), AugmentParams(rotation_deg=45))
        side = round(40 * math.sqrt(2))
        assert t.pixels.shape[:2] == (side, side)
        assert not t.mask[0, 0] and t.mask[side // 2, side // 2]
        assert 0.4 < t.mask.mean() < 0.6
        assert np.all(t.pixels[~t.mask] == 0)
        b = t.object_box
        assert b.width == pytest.approx(32 * math.sqrt(2), abs=1e-6)

    def test_illumination(self):
        p = Patch(np.full((8, 8, 3), 128, np.uint8), "fn", 0, "", BBox(0, 0, 8, 8), BBox(0, 0, 8, 8))
        t = transform_patch(p, AugmentParams(brightness_delta=0.1))
        # gray: value channel 128/255 + 0.1
        assert int(t.pixels[0, 0, 0]) == round((128 / 255 + 0.1) * 255)
        t = transform_patch(p, AugmentParams(contrast_gain=1.1, brightness_delta=-0.1))
        v = 1.1 * (128 / 255 - 0.5) + 0.5 - 0.1
        assert abs(int(t.pixels[0, 0, 0]) - v * 255) <= 0.5 + 1e-6

    def test_too_small(self):
        with pytest.raises(ValueError, match="smaller"):
            transform_patch(make_patch(3, 10), AugmentParams())

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32))
    def test_object_box_inside(self, seed):
        theta = AugmentParams.from_seed(seed)
        t = transform_patch(make_patch(24, 18), theta)
        b = t.object_box
        assert 0 <= b.x_min < b.x_max <= t.width and 0 <= b.y_min < b.y_max <= t.height
        assert t.mask.shape == t.pixels.shape[:2]


class TestParams:
    def test_ranges_over_many_draws(self):
        rng = np.random.default_rng(0)
        draws = [sample_params(rng) for _ in range(2000)]
        for d in draws:
            d.check()
        scales = np.array([d.scale for d in draws])
        assert scales.min() < 0.91 and scales.max() > 1.09

    def test_check_rejects(self):
        with pytest.raises(ValueError):
            AugmentParams(scale=1.2).check()

    def test_from_seed_reproducible(self):
        assert AugmentParams.from_seed(42) == AugmentParams.from_seed(42)

    def test_bad_range(self):
        with pytest.raises(ValueError):
            ThetaRanges(scale=(1.1, 0.9))


class TestPlacement:
    def test_all_dirt(self):
        cmap = label_map(np.full((64, 64), DIRT))
        rng = np.random.default_rng(0)
        policy = PlacementPolicy(dirt_fraction=1.0)
        for _ in range(50):
            pl = sample_placement(cmap, (10, 12), policy, [], rng)
            assert pl is not None and pl.label == DIRT
            b = pl.bbox
            assert b.x_min >= 1 and b.y_min >= 1 and b.x_max <= 63 and b.y_max <= 63
            assert (b.width, b.height) == (12, 10)

    def test_no_grass(self):
        cmap = label_map(np.full((64, 64), DIRT))
        assert sample_placement(cmap, (10, 10), PlacementPolicy(dirt_fraction=0.0), [], np.random.default_rng(0)) is None

    def test_footprint(self):
        labels = np.full((40, 40), OTHER)
        labels[:, :20] = DIRT
        cands = candidate_positions(label_map(labels), (10, 10), DIRT, 0.8)
        assert cands[:, 1].max() == 12  # 8 of 10 columns on dirt
        assert cands[:, 1].min() == 1 and cands[:, 0].min() == 1 and cands[:, 0].max() == 29

    def test_too_big(self):
        assert len(candidate_positions(label_map(np.full((10, 10), DIRT)), (9, 9), DIRT, 0.8)) == 0

    def test_dirt_share(self):
        labels = np.full((48, 48), DIRT)
        labels[:, 24:] = GRASS
        cmap = label_map(labels)
        rng = np.random.default_rng(123)
        n = 10_000
        got = [sample_placement(cmap, (8, 8), PlacementPolicy(), [], rng) for _ in range(n)]
        assert all(g is not None for g in got)
        dirt = sum(g.label == DIRT for g in got)
        assert abs(dirt / n - 0.9) <= 3 * math.sqrt(0.9 * 0.1 / n)

    def test_no_overlap(self):
        cmap = label_map(np.full((64, 64), DIRT))
        rng = np.random.default_rng(1)
        occupied = []
        for _ in range(30):
            pl = sample_placement(cmap, (8, 8), PlacementPolicy(dirt_fraction=1.0), occupied, rng)
            if pl is not None:
                assert all(iou(pl.bbox, o) == 0.0 for o in occupied)
                occupied.append(pl.bbox)
        assert len(occupied) >= 10

    def test_bad_policy(self):
        with pytest.raises(ValueError):
            PlacementPolicy(dirt_fraction=1.5)


class TestAugmentImage:
    def setup_method(self):
        rng = np.random.default_rng(5)
        self.image = rng.integers(90, 140, (96, 96, 3), dtype=np.uint8)
        self.cmap = label_map(np.full((96, 96), DIRT))

    def test_no_patches(self):
        res = augment_image(self.image, [], self.cmap)
        np.testing.assert_array_equal(res.image, self.image)
        assert res.annotations == [] and res.placements == []

    def test_one_fn(self):
        p = make_patch(20, 20, object_box=BBox(0, 0, 20, 20))
        res = augment_image(self.image, [p], self.cmap, PlacementPolicy(dirt_fraction=1.0),
                            np.random.default_rng(0), ThetaRanges(scale=(1, 1), rotation_deg=(0, 0)))
        assert len(res.annotations) == 1 and len(res.placements) == 1
        (a,) = res.annotations
        assert a.bbox.as_list() == res.placements[0]["patch_box"]
        assert a.source == "synthetic" and a.class_id == 0

    def test_annotation_follows_object_box(self):
        p = make_patch(24, 24, object_box=BBox(4, 4, 20, 20))
        res = augment_image(self.image, [p], self.cmap, PlacementPolicy(dirt_fraction=1.0),
                            np.random.default_rng(0), ThetaRanges(scale=(1, 1), rotation_deg=(0, 0)))
        x0, y0 = res.placements[0]["patch_box"][:2]
        assert res.annotations[0].bbox == BBox(x0 + 4, y0 + 4, x0 + 20, y0 + 20)

    def test_fp_not_annotated(self):
        res = augment_image(self.image, [make_patch(origin="fp")], self.cmap, PlacementPolicy(dirt_fraction=1.0),
                            np.random.default_rng(0))
        assert len(res.placements) == 1 and res.annotations == []
        assert not np.array_equal(res.image, self.image)

    def test_unchanged_outside_placements(self):
        patches = [make_patch(16, 16, seed=k) for k in range(3)]
        res = augment_image(self.image, patches, self.cmap, PlacementPolicy(dirt_fraction=1.0),
                            np.random.default_rng(3))
        touched = np.zeros(self.image.shape[:2], bool)
        for rec in res.placements:
            x0, y0, x1, y1 = (int(v) for v in rec["patch_box"])
            touched[y0:y1, x0:x1] = True
        np.testing.assert_array_equal(res.image[~touched], self.image[~touched])
        assert len(res.annotations) == len(res.placements)

    def test_skip_reported(self):
        res = augment_image(self.image, [make_patch(20, 20)], label_map(np.full((96, 96), OTHER)))
        assert res.annotations == [] and res.skips[0]["reason"] == "no_placement"


def write_inputs(root, n_bg=3, size=48, n_patches=4):
    rng = np.random.default_rng(7)
    bgs = []
    for k in range(n_bg):
        img = np.empty((size, size, 3), np.uint8)
        img[:] = (150, 120, 90)
        img[:, size // 2:] = (70, 130, 50)
        img = np.clip(img + rng.integers(-6, 7, img.shape), 0, 255).astype(np.uint8)
        path = root / "bg" / f"bg_{k}.png"
        path.parent.mkdir(parents=True, exist_ok=True)
        write_image(path, img)
        bgs.append(path)
    write_manifest(root / "bg.txt", bgs)
    patches = [make_patch(10, 10, origin=("fn", "fp", "labeled")[k % 3], seed=k) for k in range(n_patches)]
    save_patches(patches, root / "patches")
    return root / "patches", root / "bg.txt"


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestRunAugment:
    def test_outputs_and_report(self, tmp_path):
        patch_dir, bg = write_inputs(tmp_path)
        cfg = AugmentConfig(str(patch_dir), str(bg), num_images=4, patches_per_image=3, master_seed=9)
        rep = run_augment(cfg, tmp_path / "out")
        assert rep["num_images"] == 4
        assert len(list((tmp_path / "out").glob("aug_*.png"))) == 4
        assert rep["placed"] + rep["skipped"] == 12
        ann_total = sum(len(read_annotations(p, 48, 48)) for p in (tmp_path / "out").glob("aug_*.txt"))
        assert ann_total == rep["annotations"]
        assert rep["annotations"] == rep["per_origin"]["fn"] + rep["per_origin"]["labeled"]
        assert json.loads((tmp_path / "out" / "augment_report.json").read_text())["placed"] == rep["placed"]

    def test_worker_count_does_not_matter(self, tmp_path):
        patch_dir, bg = write_inputs(tmp_path)
        cfg = AugmentConfig(str(patch_dir), str(bg), num_images=6, patches_per_image=2, master_seed=3)
        run_augment(cfg, tmp_path / "w1", workers=1)
        run_augment(cfg, tmp_path / "w2", workers=2)
        a, b = tree_bytes(tmp_path / "w1"), tree_bytes(tmp_path / "w2")
        assert a.keys() == b.keys()
        for k in a:
            if k == "manifest.txt":
                continue
            assert a[k] == b[k], k

    def test_seed_changes_output(self, tmp_path):
        patch_dir, bg = write_inputs(tmp_path)
        base = dict(patch_dir=str(patch_dir), backgrounds=str(bg), num_images=2, patches_per_image=2)
        run_augment(AugmentConfig(**base, master_seed=1), tmp_path / "a")
        run_augment(AugmentConfig(**base, master_seed=2), tmp_path / "b")
        assert tree_bytes(tmp_path / "a") != tree_bytes(tmp_path / "b")

    def test_drop_fp(self, tmp_path):
        patch_dir, bg = write_inputs(tmp_path)
        rep = run_augment(AugmentConfig(str(patch_dir), str(bg), num_images=3, patches_per_image=4, fp_mode="drop"),
                          tmp_path / "out")
        assert rep["per_origin"]["fp"] == 0 and rep["num_patches"] == 3

    def test_large_run_count(self, tmp_path):
        # the image count is driven by the config alone
        patch_dir, bg = write_inputs(tmp_path, size=16, n_patches=1)
        rep = run_augment(AugmentConfig(str(patch_dir), str(bg), num_images=3929, patches_per_image=0),
                          tmp_path / "out")
        assert rep["num_images"] == 3929
        assert len(list((tmp_path / "out").glob("aug_*.png"))) == 3929

    def test_config_round_trip(self):
        cfg = AugmentConfig("p", "b", num_images=5, policy=PlacementPolicy(dirt_fraction=0.7))
        again = AugmentConfig.from_dict(cfg.to_dict())
        assert again == cfg

    def test_config_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            AugmentConfig.from_dict({"patch_dir": "p", "backgrounds": "b", "nonsense": 1})


class TestSelectBackgrounds:
    def test_distinct_when_available(self):
        idx, repl = select_backgrounds(10, 4, seed=0)
        assert len(set(idx)) == 4 and not repl

    def test_with_replacement(self):
        idx, repl = select_backgrounds(2, 5, seed=0)
        assert len(idx) == 5 and repl and set(idx) <= {0, 1}
