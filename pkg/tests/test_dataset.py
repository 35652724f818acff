import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from dlsr_grasp.dataset import (PatchBatch, Scene, discover_scenes, load_dataset, load_scene, make_splits,
                                read_cloud, read_rectangles, sample_patches, valid_locations, write_cloud,
                                write_rectangles)
from dlsr_grasp.errors import DimensionMismatch, ParseError, TooFewObjects
from dlsr_grasp.geometry import GraspRect, angular_diff
from dlsr_grasp.imageproc import MultiChannelImage
from dlsr_grasp.patches import flatten_windows


def write_lines(path, lines):
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


SQUARE = ["0 0", "4 0", "4 2", "0 2"]
SHIFTED = ["10 10", "16 10", "16 13", "10 13"]


def blank_scene(sid, obj, shape=(8, 8)):
    H, W = shape
    return Scene(sid, np.zeros((H, W, 3), np.uint8), np.zeros((H, W, 3)), np.ones((H, W), bool), object_id=obj)


class TestRectangles:
    def test_two_rectangles(self, tmp_path):
        p = tmp_path / "r.txt"
        write_lines(p, SQUARE + SHIFTED)
        rects, dropped = read_rectangles(p)
        assert len(rects) == 2 and dropped == 0
        assert (rects[1].x, rects[1].y, rects[1].w, rects[1].h) == pytest.approx((13, 11.5, 6, 3))

    def test_nan_rectangle_dropped(self, tmp_path):
        p = tmp_path / "r.txt"
        write_lines(p, SQUARE + ["NaN NaN", "4 0", "4 2", "0 2"] + SHIFTED)
        rects, dropped = read_rectangles(p)
        assert len(rects) == 2 and dropped == 1

    def test_center_outside_image_dropped(self, tmp_path):
        p = tmp_path / "r.txt"
        write_lines(p, SQUARE + SHIFTED)
        rects, dropped = read_rectangles(p, shape=(10, 10))
        assert len(rects) == 1 and dropped == 1

    @pytest.mark.parametrize("bad", ["1 2 3", "a b"])
    def test_malformed_line(self, tmp_path, bad):
        p = tmp_path / "r.txt"
        write_lines(p, SQUARE[:2] + [bad] + SQUARE[3:])
        with pytest.raises(ParseError) as err:
            read_rectangles(p)
        assert err.value.line == 3

    def test_incomplete_rectangle(self, tmp_path):
        p = tmp_path / "r.txt"
        write_lines(p, SQUARE + SHIFTED[:3])
        with pytest.raises(ParseError):
            read_rectangles(p)

    def test_round_trip(self, tmp_path):
        rects = [GraspRect(20, 30, 35, 18, 7), GraspRect(5, 6, 170, 4, 9)]
        write_rectangles(tmp_path / "r.txt", rects)
        back, _ = read_rectangles(tmp_path / "r.txt")
        for a, b in zip(rects, back):
            assert (b.x, b.y, b.w, b.h) == pytest.approx((a.x, a.y, a.w, a.h), abs=1e-5)
            assert angular_diff(a.theta, b.theta) < 1e-4


class TestCloud:
    def test_unlisted_pixels_invalid(self, tmp_path):
        p = tmp_path / "c.txt"
        write_lines(p, ["VERSION .7", "FIELDS x y z rgb index", "1 2 3 0 0", "4 5 6 0 5", "nan nan nan 0 3"])
        cloud, valid = read_cloud(p, (2, 3))
        assert valid.tolist() == [[True, False, False], [False, False, True]]
        np.testing.assert_array_equal(cloud[1, 2], [4, 5, 6])

    def test_index_out_of_range(self, tmp_path):
        p = tmp_path / "c.txt"
        write_lines(p, ["1 2 3 6"])
        with pytest.raises(DimensionMismatch):
            read_cloud(p, (2, 3))

    def test_malformed_row(self, tmp_path):
        p = tmp_path / "c.txt"
        write_lines(p, ["1 2 3 0", "1 2 x 1"])
        with pytest.raises(ParseError):
            read_cloud(p, (2, 3))

    def test_round_trip(self, tmp_path, rng):
        cloud = rng.normal(size=(4, 5, 3)).round(3)
        valid = rng.uniform(size=(4, 5)) < 0.7
        write_cloud(tmp_path / "c.txt", cloud, valid)
        back, v = read_cloud(tmp_path / "c.txt", (4, 5))
        assert np.array_equal(v, valid)
        np.testing.assert_allclose(back[valid], cloud[valid], atol=1e-9)


def write_scene(root, stem, shape=(12, 16), pos=SQUARE, neg=SHIFTED):
    H, W = shape
    Image.fromarray(np.full((H, W, 3), 100, np.uint8)).save(root / f"{stem}r.png")
    valid = np.ones((H, W), bool)
    valid[0, 0] = False
    write_cloud(root / f"{stem}.txt", np.ones((H, W, 3)), valid)
    write_lines(root / f"{stem}cpos.txt", pos)
    write_lines(root / f"{stem}cneg.txt", neg)


class TestLoad:
    def test_load_scene(self, tmp_path):
        write_scene(tmp_path, "pcd0001")
        s = load_scene(tmp_path / "pcd0001r.png", tmp_path / "pcd0001.txt",
                       tmp_path / "pcd0001cpos.txt", tmp_path / "pcd0001cneg.txt", object_id=4)
        assert s.id == "pcd0001" and s.object_id == 4
        assert s.rgb.shape == (12, 16, 3) and not s.valid[0, 0] and s.valid.sum() == 191
        assert len(s.pos_rects) == 1 and len(s.neg_rects) == 1

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            Scene("a", np.zeros((4, 4, 3), np.uint8), np.zeros((4, 5, 3)), np.ones((4, 5), bool))

    def test_discover_and_object_map(self, tmp_path):
        for stem in ("pcd0003", "pcd0001", "pcd0002"):
            write_scene(tmp_path, stem)
        (tmp_path / "objects.tsv").write_text("pcd0001\t7\npcd0002\t7\n")
        entries = discover_scenes(tmp_path)
        assert [e["id"] for e in entries] == ["pcd0001", "pcd0002", "pcd0003"]
        assert [e["object_id"] for e in entries] == [7, 7, 8]
        scenes = load_dataset(tmp_path, limit=2)
        assert [s.id for s in scenes] == ["pcd0001", "pcd0002"]


class TestSplits:
    def test_image_wise_sizes(self):
        scenes = [blank_scene(f"s{i}", i) for i in range(10)]
        plan = make_splits(scenes, "image_wise", 5, 0)
        assert [len(f) for f in plan.folds] == [2] * 5

    def test_object_wise_intact(self):
        scenes = [blank_scene(f"s{o}{v}", o) for o in range(4) for v in range(3)]
        plan = make_splits(scenes, "object_wise", 2, 3)
        assert [len(f) for f in plan.folds] == [6, 6]
        fold_of = {sid: i for i, f in enumerate(plan.folds) for sid in f}
        for o in range(4):
            assert len({fold_of[f"s{o}{v}"] for v in range(3)}) == 1

    def test_too_few_objects(self):
        scenes = [blank_scene(f"s{v}", 0) for v in range(6)]
        with pytest.raises(TooFewObjects):
            make_splits(scenes, "object_wise", 2, 0)

    @settings(max_examples=40)
    @given(st.lists(st.integers(0, 9), min_size=6, max_size=30), st.integers(2, 5), st.integers(0, 10**6),
           st.sampled_from(["image_wise", "object_wise"]))
    def test_partition_properties(self, objects, k, seed, mode):
        scenes = [blank_scene(f"s{i:02d}", o) for i, o in enumerate(objects)]
        if mode == "object_wise" and len(set(objects)) < k:
            with pytest.raises(TooFewObjects):
                make_splits(scenes, mode, k, seed)
            return
        plan = make_splits(scenes, mode, k, seed)
        flat = [sid for f in plan.folds for sid in f]
        assert sorted(flat) == sorted(s.id for s in scenes)
        assert len(flat) == len(set(flat))
        assert plan == make_splits(scenes, mode, k, seed)
        if mode == "image_wise":
            sizes = [len(f) for f in plan.folds]
        else:
            obj = {s.id: s.object_id for s in scenes}
            sizes = [len({obj[sid] for sid in f}) for f in plan.folds]
            fold_of = {}
            for i, f in enumerate(plan.folds):
                for sid in f:
                    assert fold_of.setdefault(obj[sid], i) == i
        assert max(sizes) - min(sizes) <= 1


def random_image(rng, H=20, W=24, hole=True):
    data = rng.normal(size=(H, W, 8)) * 10
    mask = np.ones((H, W, 8), bool)
    if hole:
        mask[5:12, 3:10, 4:] = False
    data[~mask] = 0
    return MultiChannelImage(data, mask)


class TestSamplePatches:
    def test_count_and_shape(self, rng):
        b = sample_patches([random_image(rng)], 500, 0)
        assert isinstance(b, PatchBatch)
        assert b.patches.shape == (500, 288) and b.masks.shape == (500, 288)

    def test_aux_doubles(self, rng):
        b = sample_patches([random_image(rng)], 300, 0, aux_sources=[random_image(rng)])
        assert len(b) == 600
        assert list(b.sources[:300]) == ["main"] * 300 and list(b.sources[300:]) == ["aux"] * 300

    def test_deterministic(self, rng):
        imgs = [random_image(rng), random_image(rng)]
        a, b = sample_patches(imgs, 200, 5), sample_patches(imgs, 200, 5)
        assert np.array_equal(a.patches, b.patches) and np.array_equal(a.masks, b.masks)

    def test_masked_entries_zero(self, rng):
        b = sample_patches([random_image(rng)], 1000, 1)
        assert not b.patches[~b.masks].any()

    def test_patches_are_windows(self, rng):
        img = random_image(rng, H=10, W=7)
        windows = {}
        for r in range(5):
            for c in range(2):
                windows[flatten_windows(img.data[r:r + 6, c:c + 6]).tobytes()] = (r, c)
        b = sample_patches([img], 200, 2)
        for p, m in zip(b.patches, b.masks):
            r, c = windows[p.tobytes()]
            assert np.array_equal(m, flatten_windows(img.mask[r:r + 6, c:c + 6]))

    def test_skips_fully_masked_windows(self, rng):
        img = random_image(rng, H=12, W=12, hole=False)
        img.mask[:, :8] = False
        img.data[~img.mask] = 0
        idx, gw = valid_locations(img.mask)
        assert gw == 7 and sorted(set(idx % gw)) == [3, 4, 5, 6]
        b = sample_patches([img], 300, 0)
        assert b.masks.any(axis=1).all()

    def test_no_usable_image(self):
        img = MultiChannelImage(np.zeros((4, 4, 8)), np.ones((4, 4, 8), bool))
        with pytest.raises(ValueError):
            sample_patches([img], 10, 0)

    def test_uniform_over_images(self, rng):
        small, big = random_image(rng, 8, 8, False), random_image(rng, 40, 40, False)
        b = sample_patches([small, big], 4000, 0)
        small_set = {flatten_windows(small.data[r:r + 6, c:c + 6]).tobytes() for r in range(3) for c in range(3)}
        frac = np.mean([p.tobytes() in small_set for p in b.patches])
        assert abs(frac - 0.5) < 0.05
