import random

import pytest

from mspad.dataset import Annotation, ClassRegistry, ImageRecord
from mspad.geometry import BBox, ScoredBox, intersection_area
from mspad.tiling import (
    GridSpec,
    TileProjectionPolicy,
    make_grid,
    project_annotations,
    remap_detections,
)


def assert_partition(tiles, width, height):
    total = sum(t.region.area for t in tiles)
    assert total == width * height
    for i, a in enumerate(tiles):
        for b in tiles[i + 1 :]:
            assert intersection_area(a.region, b.region) == 0.0


class TestMakeGrid:
    def test_even_shape(self):
        tiles = make_grid(5472, 3648, GridSpec(4, 4))
        assert len(tiles) == 16
        assert all(t.region.width == 1368 and t.region.height == 912 for t in tiles)
        assert_partition(tiles, 5472, 3648)

    def test_remainder_absorbed_by_last_row(self):
        tiles = make_grid(5472, 3078, GridSpec(4, 4))
        assert all(t.region.width == 1368 for t in tiles)
        heights = {}
        for t in tiles:
            heights[t.tile_id[0]] = t.region.height
        assert [heights[r] for r in range(4)] == [769, 769, 769, 771]
        assert_partition(tiles, 5472, 3078)

    def test_identity_grid(self):
        (tile,) = make_grid(10, 10, GridSpec(1, 1))
        assert tile.region == BBox(0, 0, 10, 10)

    def test_too_fine_rejected(self):
        with pytest.raises(ValueError, match="too fine"):
            make_grid(3, 10, GridSpec(1, 4))

    def test_partition_randomized(self):
        rng = random.Random(6)
        for _ in range(200):
            w = rng.randint(64, 8192)
            h = rng.randint(64, 8192)
            spec = GridSpec(rng.randint(1, 8), rng.randint(1, 8))
            assert_partition(make_grid(w, h, spec), w, h)


def _record(annotations, width=5472, height=3648):
    return ImageRecord("img", width, height, tuple(annotations))


class TestProject:
    def test_containment(self):
        tiles = make_grid(5472, 3648, GridSpec(4, 4))
        # fully inside tile (2,1): x in [1368, 2736), y in [1824, 2736)
        ann = Annotation(4, BBox(1400, 1900, 1500, 2000))
        projected = project_annotations(_record([ann]), tiles)
        for tile_id, anns in projected.items():
            if tile_id == (2, 1):
                assert anns == [Annotation(4, BBox(1400 - 1368, 1900 - 1824, 1500 - 1368, 2000 - 1824))]
            else:
                assert anns == []

    def test_bisected_appears_in_both(self):
        tiles = make_grid(400, 400, GridSpec(1, 2))
        ann = Annotation(0, BBox(180, 10, 220, 50))  # split 50/50 at x=200
        projected = project_annotations(_record([ann], 400, 400), tiles, TileProjectionPolicy(0.25))
        assert projected[(0, 0)] == [Annotation(0, BBox(180, 10, 200, 50))]
        assert projected[(0, 1)] == [Annotation(0, BBox(0, 10, 20, 50))]

    def test_sliver_discarded(self):
        tiles = make_grid(400, 400, GridSpec(1, 2))
        # 10% of the area past x=200
        ann = Annotation(0, BBox(110, 10, 210, 50))
        projected = project_annotations(_record([ann], 400, 400), tiles, TileProjectionPolicy(0.25))
        assert len(projected[(0, 0)]) == 1
        assert projected[(0, 1)] == []

    def test_class_filter(self):
        tiles = make_grid(400, 400, GridSpec(1, 1))
        anns = [Annotation(0, BBox(0, 0, 10, 10)), Annotation(4, BBox(20, 20, 30, 30))]
        projected = project_annotations(_record(anns, 400, 400), tiles, classes={4})
        assert projected[(0, 0)] == [Annotation(4, BBox(20, 20, 30, 30))]


class TestRemap:
    def test_identity_tile(self):
        tiles = make_grid(5472, 3648, GridSpec(4, 4))
        det = ScoredBox(BBox(10, 20, 60, 80), 4, 0.9)
        assert remap_detections((0, 0), tiles, [det]) == [det]

    def test_tile_origin_offset(self):
        tiles = make_grid(5472, 3648, GridSpec(4, 4))
        det = ScoredBox(BBox(10, 20, 60, 80), 4, 0.9)
        (out,) = remap_detections((1, 2), tiles, [det])
        assert out.box == BBox(2746, 932, 2796, 992)
        assert out.score == 0.9 and out.class_id == 4

    def test_unknown_tile(self):
        tiles = make_grid(400, 400, GridSpec(2, 2))
        with pytest.raises(KeyError):
            remap_detections((5, 5), tiles, [])

    def test_clips_to_image_bounds(self):
        tiles = make_grid(400, 400, GridSpec(2, 2))
        # local box reaching past the frame from the last tile
        det = ScoredBox(BBox(100, 100, 300, 300), 0, 0.5)
        (out,) = remap_detections((1, 1), tiles, [det])
        assert out.box == BBox(300, 300, 400, 400)

    def test_count_preserved(self):
        rng = random.Random(9)
        tiles = make_grid(1000, 800, GridSpec(3, 4))
        for tile in tiles:
            dets = []
            for _ in range(20):
                x0 = rng.uniform(0, tile.region.width - 1)
                y0 = rng.uniform(0, tile.region.height - 1)
                dets.append(
                    ScoredBox(
                        BBox(x0, y0, x0 + rng.uniform(1, 50), y0 + rng.uniform(1, 50)),
                        0,
                        rng.random(),
                    )
                )
            assert len(remap_detections(tile.tile_id, tiles, dets)) == len(dets)


class TestRoundTrip:
    def test_project_then_remap_is_identity(self):
        rng = random.Random(5)
        tiles = make_grid(5472, 3648, GridSpec(4, 4))
        for _ in range(100):
            # box strictly inside one tile
            tile = rng.choice(tiles)
            r = tile.region
            x0 = rng.uniform(r.x_min, r.x_max - 2)
            y0 = rng.uniform(r.y_min, r.y_max - 2)
            box = BBox(x0, y0, rng.uniform(x0 + 1, r.x_max), rng.uniform(y0 + 1, r.y_max))
            ann = Annotation(4, box)
            projected = project_annotations(_record([ann]), tiles)
            assert sum(len(v) for v in projected.values()) == 1
            (local,) = projected[tile.tile_id]
            (back,) = remap_detections(
                tile.tile_id, tiles, [ScoredBox(local.box, 4, 1.0)]
            )
            assert back.box == box

    def test_one_by_one_grid_identity(self):
        tiles = make_grid(500, 300, GridSpec(1, 1))
        ann = Annotation(2, BBox(17.5, 20.25, 400, 299))
        projected = project_annotations(_record([ann], 500, 300), tiles)
        assert projected[(0, 0)] == [ann]
        det = ScoredBox(ann.box, 2, 0.7)
        assert remap_detections((0, 0), tiles, [det]) == [det]
