import json
from collections import Counter

import numpy as np
import pytest

from logattn import pnm
from logattn.annotations import BoundingBox, SizeBin, dataset_stats, size_bin
from logattn.evaluation import iou
from logattn.rng import make_rng
from logattn.synth import (
    BINS,
    DEFAULT_BIN_MIX,
    PlacementError,
    SceneSpec,
    _layout,
    generate_dataset,
    generate_scene,
    load_dataset,
    load_spec,
    sample_bins,
    sample_object_mask,
)


@pytest.fixture(scope="module")
def scenes():
    return generate_dataset(SceneSpec(), 40, 99)[0]


def test_default_mix_matches_table_counts():
    counts = np.array([11090, 33116, 4692])
    np.testing.assert_allclose(DEFAULT_BIN_MIX, counts / counts.sum(), atol=5e-4)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"image_size": (31, 64)},
        {"bin_mix": (0.5, 0.5, 0.1)},
        {"bin_mix": (1.2, -0.2, 0.0)},
        {"objects_per_image": (3, 2)},
        {"shapes": ("star",)},
        {"contrast": (0.0, 0.1)},
        {"image_size": (64, 64)},  # large objects cannot fit
    ],
)
def test_spec_validation(kwargs):
    with pytest.raises(ValueError):
        SceneSpec(**kwargs)


def test_spec_dict_round_trip(tmp_path):
    spec = SceneSpec(image_size=(96, 128), rgb=True)
    assert SceneSpec.from_dict(spec.to_dict()) == spec
    (tmp_path / "s.json").write_text(json.dumps(spec.to_dict()))
    assert load_spec(tmp_path / "s.json") == spec


def test_scene_is_deterministic():
    a, b = generate_scene(SceneSpec(), 5), generate_scene(SceneSpec(), 5)
    assert np.array_equal(a.pixels, b.pixels) and a.annotation == b.annotation
    c = generate_scene(SceneSpec(), 6)
    assert not np.array_equal(a.pixels, c.pixels)


def test_all_small_mix():
    spec = SceneSpec(bin_mix=(1.0, 0.0, 0.0), image_size=(64, 64))
    for seed in range(20):
        assert all(b.area <= 1024 for b in generate_scene(spec, seed).annotation.boxes)


def test_sampled_bins_follow_mix():
    bins = sample_bins(SceneSpec(), 10_000, make_rng(1))
    freq = Counter(bins)
    for b, p in zip(BINS, DEFAULT_BIN_MIX):
        assert abs(freq[b] / 10_000 - p) <= 0.02


def test_layout_keeps_requested_bins():
    spec = SceneSpec()
    rng = make_rng(3)
    for _ in range(30):
        bins = sample_bins(spec, 5, rng)
        placed = [size_bin(BoundingBox(*box)) for box, _ in _layout(spec, bins, rng, "x")]
        assert Counter(placed) == Counter(bins)


def test_sampled_masks_land_in_bin():
    spec = SceneSpec()
    rng = make_rng(8)
    for b in SizeBin:
        for _ in range(20):
            mask = sample_object_mask(spec, b, rng)
            h, w = mask.shape
            assert size_bin(BoundingBox(0, 0, w, h)) is b


def test_boxes_tight_inside_and_disjoint(scenes):
    for s in scenes:
        ann = s.annotation
        assert len(s.masks) == len(ann.boxes)
        for b, m in zip(ann.boxes, s.masks):
            assert 0 <= b.xmin and b.xmax <= ann.width and 0 <= b.ymin and b.ymax <= ann.height
            assert m.shape == (b.height, b.width)
            # each edge row/column holds object pixels, so shrinking any side drops some
            assert m[0].any() and m[-1].any() and m[:, 0].any() and m[:, -1].any()
        for i, a in enumerate(ann.boxes):
            for b in ann.boxes[i + 1 :]:
                assert iou(a, b) == 0.0


def test_object_count_in_range(scenes):
    lo, hi = SceneSpec().objects_per_image
    assert all(lo <= len(s.annotation.boxes) <= hi for s in scenes)


def test_objects_stand_out_from_background():
    s = generate_scene(SceneSpec(background=dict(bubble_density=0.0, reflection_probability=0.0)), 12)
    lum = s.pixels.astype(float)
    for b, m in zip(s.annotation.boxes, s.masks):
        region = lum[int(b.ymin) : int(b.ymax), int(b.xmin) : int(b.xmax)]
        inside = region[m].mean()
        y0, x0 = max(int(b.ymin) - 3, 0), max(int(b.xmin) - 3, 0)
        ring = lum[y0 : int(b.ymax) + 3, x0 : int(b.xmax) + 3].copy()
        oy, ox = int(b.ymin) - y0, int(b.xmin) - x0
        ring[oy : oy + m.shape[0], ox : ox + m.shape[1]] = np.nan  # keep only the frame around the box
        assert abs(inside - np.nanmedian(ring)) > 20


def test_rgb_scene():
    s = generate_scene(SceneSpec(rgb=True, image_size=(64, 48), bin_mix=(1, 0, 0)), 1)
    assert s.pixels.shape == (48, 64, 3) and s.pixels.dtype == np.uint8
    assert s.to_chw().shape == (3, 48, 64)


def test_too_dense_spec_fails():
    spec = SceneSpec(image_size=(32, 32), bin_mix=(0, 1, 0), objects_per_image=(4, 4), max_retries=5)
    with pytest.raises(PlacementError):
        generate_scene(spec, 0)


def test_dataset_on_disk_round_trip(tmp_path):
    scenes, manifest = generate_dataset(SceneSpec(), 3, 11, tmp_path)
    assert manifest[0] == ("images/scene_00000.pgm", "annotations/scene_00000.xml")
    loaded = load_dataset(tmp_path / "manifest.txt")
    for a, b in zip(scenes, loaded):
        assert np.array_equal(a.pixels, b.pixels)
        assert a.annotation == b.annotation
    assert pnm.read(tmp_path / manifest[0][0]).shape == (192, 192)


def test_dataset_seeds_differ_and_n_validated():
    a = generate_dataset(SceneSpec(), 2, 1)[0]
    b = generate_dataset(SceneSpec(), 2, 2)[0]
    assert not np.array_equal(a[0].pixels, b[0].pixels)
    assert len(generate_dataset(SceneSpec(), 1, 1)[1]) == 1
    with pytest.raises(ValueError):
        generate_dataset(SceneSpec(), 0, 1)


def test_dataset_order_medium_small_large():
    scenes = generate_dataset(SceneSpec(), 200, 2019)[0]
    c = dataset_stats(s.annotation for s in scenes).counts
    assert c["medium"] > c["small"] > c["large"]


def test_pnm_round_trip_and_errors():
    rng = np.random.default_rng(0)
    gray = rng.integers(0, 256, (5, 7), dtype=np.uint8)
    rgb = rng.integers(0, 256, (4, 3, 3), dtype=np.uint8)
    assert np.array_equal(pnm.decode(pnm.encode(gray)), gray)
    assert np.array_equal(pnm.decode(pnm.encode(rgb)), rgb)
    assert pnm.encode(gray).startswith(b"P5")
    with pytest.raises(ValueError):
        pnm.decode(b"P3\n1 1\n255\n0")
