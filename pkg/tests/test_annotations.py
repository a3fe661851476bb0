import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rarespot.annotations import (
    Annotation,
    AnnotationFormatError,
    BBox,
    Detection,
    TileSpec,
    dataset_stats,
    dataset_stats_from_manifest,
    read_annotations,
    read_detections,
    tile_image,
    tile_offsets,
    write_annotations,
    write_detections,
)


class TestTextFormat:
    def test_parse_line(self, tmp_path):
        p = tmp_path / "a.txt"
        p.write_text("0 0.5 0.5 0.1 0.2\n")
        (a,) = read_annotations(p, 512, 512)
        assert a.class_id == 0
        np.testing.assert_allclose(a.bbox.as_list(), [230.4, 204.8, 281.6, 307.2], atol=1e-9)

    def test_empty_file(self, tmp_path):
        p = tmp_path / "a.txt"
        p.write_text("")
        assert read_annotations(p, 100, 100) == []

    def test_zero_width_rejected_with_line_number(self, tmp_path):
        p = tmp_path / "a.txt"
        p.write_text("1 0.5 0.5 0.1 0.1\n0 0.5 0.5 0 0.2\n")
        with pytest.raises(AnnotationFormatError, match=":2:"):
            read_annotations(p, 512, 512)

    @pytest.mark.parametrize("line", ["0 1.5 0.5 0.1 0.1", "0 0.5 0.5 0.1", "x 0.5 0.5 0.1 0.1", "7 0.5 0.5 0.1 0.1"])
    def test_malformed(self, tmp_path, line):
        p = tmp_path / "a.txt"
        p.write_text(line + "\n")
        with pytest.raises(AnnotationFormatError):
            read_annotations(p, 64, 64)

    @settings(max_examples=50)
    @given(boxes=st.lists(st.tuples(st.integers(0, 1), st.floats(0.1, 0.9), st.floats(0.1, 0.9),
                                    st.floats(0.01, 0.2), st.floats(0.01, 0.2)), max_size=8),
           w=st.integers(32, 2000), h=st.integers(32, 2000))
    def test_round_trip(self, tmp_path_factory, boxes, w, h):
        path = tmp_path_factory.mktemp("rt") / "a.txt"
        anns = [Annotation(BBox.from_cxcywh(cx, cy, bw, bh, w, h), c) for c, cx, cy, bw, bh in boxes]
        write_annotations(path, anns, w, h)
        back = read_annotations(path, w, h)
        assert [a.class_id for a in back] == [a.class_id for a in anns]
        for a, b in zip(anns, back):
            np.testing.assert_allclose(b.bbox.to_cxcywh(w, h), a.bbox.to_cxcywh(w, h), atol=1e-6)

    def test_detection_round_trip(self, tmp_path):
        path = tmp_path / "d.txt"
        dets = [Detection(BBox(10, 20, 30, 50), 1, 0.875), Detection(BBox(0, 0, 5, 5), 0, 0.1)]
        write_detections(path, dets, 100, 100)
        back = read_detections(path, 100, 100)
        assert [d.confidence for d in back] == [0.875, 0.1]
        np.testing.assert_allclose(back[0].bbox.as_list(), [10, 20, 30, 50], atol=1e-4)


def _img(h, w):
    return np.arange(h * w * 3, dtype=np.uint32).reshape(h, w, 3).astype(np.uint8)


class TestTiling:
    def test_exact_grid(self):
        tiles = tile_image(np.zeros((1024, 1024, 3), np.uint8), [], TileSpec(512))
        assert [off for _, _, off in tiles] == [(0, 0), (512, 0), (0, 512), (512, 512)]
        assert all(t.shape == (512, 512, 3) for t, _, _ in tiles)

    def test_edge_anchoring(self):
        assert tile_offsets(1100, 512, 512) == [0, 512, 588]
        assert tile_offsets(512, 512, 512) == [0]
        assert tile_offsets(1000, 512, 412) == [0, 412, 488]

    def test_too_small(self):
        with pytest.raises(ValueError):
            tile_image(np.zeros((100, 600, 3), np.uint8), [], TileSpec(512))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            TileSpec(512, overlap=512)
        with pytest.raises(ValueError):
            TileSpec(512, min_box_visibility=0)

    def test_interior_box_translated(self):
        a = Annotation(BBox(600, 100, 640, 130), 1)
        tiles = tile_image(np.zeros((1024, 1024, 3), np.uint8), [a], TileSpec(512))
        hits = [(off, anns) for _, anns, off in tiles if anns]
        assert len(hits) == 1
        off, (b,) = hits[0]
        assert off == (512, 0)
        assert b.bbox == BBox(88, 100, 128, 130) and b.class_id == 1

    def test_straddling_box(self):
        # 40 px wide, split 20/20 across the x=512 seam: each side keeps half the area
        a = Annotation(BBox(492, 100, 532, 130), 0)
        img = np.zeros((512, 1024, 3), np.uint8)
        kept = [anns for _, anns, _ in tile_image(img, [a], TileSpec(512, 0, 0.4))]
        assert [len(k) for k in kept] == [1, 1]
        assert kept[0][0].bbox == BBox(492, 100, 512, 130)
        assert kept[1][0].bbox == BBox(0, 100, 20, 130)
        kept = [anns for _, anns, _ in tile_image(img, [a], TileSpec(512, 0, 0.6))]
        assert [len(k) for k in kept] == [0, 0]

    def test_pixels_copied(self):
        img = _img(600, 700)
        for tile, _, (x0, y0) in tile_image(img, [], TileSpec(256, 32)):
            np.testing.assert_array_equal(tile, img[y0:y0 + 256, x0:x0 + 256])

    @settings(max_examples=40, deadline=None)
    @given(h=st.integers(64, 300), w=st.integers(64, 300), t=st.sampled_from([32, 48, 64]),
           overlap=st.integers(0, 16))
    def test_coverage(self, h, w, t, overlap):
        counts = np.zeros((h, w), int)
        for _, _, (x0, y0) in tile_image(np.zeros((h, w, 1), np.uint8), [], TileSpec(t, overlap)):
            counts[y0:y0 + t, x0:x0 + t] += 1
        assert counts.min() >= 1
        if overlap == 0 and h % t == 0 and w % t == 0:
            assert counts.max() == 1

    @settings(max_examples=40, deadline=None)
    @given(data=st.data(), t=st.sampled_from([32, 64]), overlap=st.integers(0, 8))
    def test_interior_boxes_never_lost(self, data, t, overlap):
        h, w = 200, 230
        boxes = data.draw(st.lists(st.tuples(st.integers(0, w - 12), st.integers(0, h - 12),
                                             st.integers(2, 12), st.integers(2, 12)), max_size=10))
        anns = [Annotation(BBox(x, y, x + bw, y + bh), 0) for x, y, bw, bh in boxes]
        tiles = tile_image(np.zeros((h, w, 1), np.uint8), anns, TileSpec(t, overlap))
        offsets = [off for _, _, off in tiles]
        interior = [a for a in anns if any(x0 <= a.bbox.x_min and a.bbox.x_max <= x0 + t and
                                           y0 <= a.bbox.y_min and a.bbox.y_max <= y0 + t for x0, y0 in offsets)]
        kept = sum(len(k) for _, k, _ in tiles)
        assert kept >= len(interior)
        for a in interior:
            assert any(a.bbox.translate(-x0, -y0) in [b.bbox for b in k] for _, k, (x0, y0) in tiles)


class TestStats:
    def test_corpus_scale_means(self):
        # 1,850 prairie dogs and 11,900 burrows over 24,767 tiles
        n_tiles = 24767
        tiles = [[] for _ in range(n_tiles)]
        box = BBox(0, 0, 33, 33)
        for k in range(1850):
            tiles[(k * 13) % n_tiles].append(Annotation(box, 0))
        for k in range(11900):
            tiles[(k * 7) % n_tiles].append(Annotation(box, 1))
        rep = dataset_stats(tiles)
        assert rep["num_tiles"] == n_tiles
        assert rep["classes"]["0"]["per_tile"] == pytest.approx(0.0747, abs=5e-5)
        assert round(rep["classes"]["0"]["per_tile"], 2) == 0.07
        assert round(rep["classes"]["1"]["per_tile"], 2) == 0.48

    def test_empty(self):
        rep = dataset_stats([])
        assert rep["num_tiles"] == 0
        assert all(c["count"] == 0 and c["per_tile"] == 0 for c in rep["classes"].values())

    def test_single_box(self):
        rep = dataset_stats([[Annotation(BBox(10, 10, 43, 43), 0)]])
        c = rep["classes"]["0"]
        assert c["width"]["mean"] == 33 and c["height"]["mean"] == 33

    def test_manifest(self, tmp_path):
        write_annotations(tmp_path / "t0.txt", [Annotation(BBox(0, 0, 32, 16), 0)], 512, 512)
        write_annotations(tmp_path / "t1.txt", [], 512, 512)
        (tmp_path / "m.txt").write_text("t0.png\nt1.png\nt2.png\n")
        rep = dataset_stats_from_manifest(tmp_path / "m.txt")
        assert rep["num_tiles"] == 2
        assert rep["classes"]["0"]["count"] == 1
        assert rep["classes"]["0"]["width"]["max"] == pytest.approx(32, abs=1e-3)
        assert rep["missing"] == [str(tmp_path / "t2.txt")]
