"""End-to-end acceptance checks, one group per criterion.

The per-criterion PASS/FAIL lines are printed by the summary hook in conftest.py.
"""

import hashlib
import json
import math
import os
import time

import numpy as np
import pytest
from _helpers import brute_force_nms, random_annotation, random_detection_instance, reference_greedy_match

from logattn.annotations import BoundingBox, SizeBin, dataset_stats, filter_min_size, parse_voc, size_bin, size_bin_of_area, write_voc
from logattn.attention import eq2_discrepancy_report, gradient_check, log_attention_backward, log_attention_forward
from logattn.cli import EXIT_OK, main
from logattn.detector import nms
from logattn.evaluation import average_precision, brute_force_ap, match, size_binned_ap
from logattn.rng import DEFAULT_SEED
from logattn.synth import SceneSpec, generate_dataset

FIXED_POINT = math.e - 1


def run(*argv):
    return main([str(a) for a in argv])


def digest(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = os.path.join(dirpath, f)
            out[os.path.relpath(p, root)] = hashlib.sha256(open(p, "rb").read()).hexdigest()
    return out


# -- 1: gradient correctness -------------------------------------------------------------------


@pytest.mark.criterion(1)
def test_gradient_matches_finite_differences(note):
    t0 = time.perf_counter()
    points = np.linspace(0.01, 10.0, 1001)[1:]  # open at 0.01
    rows = gradient_check(points, eps=1e-6)
    worst = max(r.rel_err for r in rows)
    negative = np.linspace(-10.0, -0.01, 1000)
    neg_grad = log_attention_backward(negative, np.ones_like(negative))
    elapsed = time.perf_counter() - t0
    note(f"{len(rows)} points, max rel err {worst:.2e}, {elapsed:.2f}s")
    assert len(rows) >= 1000
    assert worst <= 1e-6
    assert np.all(neg_grad == 0.0)
    assert elapsed < 5.0


# -- 2: derivative convention discrepancy ------------------------------------------------------


@pytest.mark.criterion(2)
def test_convention_discrepancy_values(note):
    rows = {r.f: r.abs_diff for r in eq2_discrepancy_report(0.0, 5.0, 51)}
    note(f"diff at 1: {rows[1.0]:.3g}, diff at 5: {rows[5.0]:.12f}")
    assert rows[1.0] == 0.0
    assert abs(rows[5.0] - 2 / 3) <= 1e-9


# -- 3: fixed point ----------------------------------------------------------------------------------


@pytest.mark.criterion(3)
def test_fixed_point_and_regimes(note):
    at_fixed = float(log_attention_forward(np.array([FIXED_POINT]))[0])
    assert abs(at_fixed - FIXED_POINT) <= 1e-12
    below = np.linspace(0.0, FIXED_POINT, 1002)[1:-1]
    above = np.linspace(FIXED_POINT, 50.0, 1001)[1:]
    assert below.size == 1000 and above.size == 1000
    assert np.all(log_attention_forward(below) < below)
    assert np.all(log_attention_forward(above) > above)
    note(f"|g(e-1) - (e-1)| = {abs(at_fixed - FIXED_POINT):.1e}")


# -- 4: evaluator oracles ----------------------------------------------------------------------------


@pytest.mark.criterion(4)
def test_evaluator_matches_oracles(note):
    t0 = time.perf_counter()
    rng = np.random.default_rng(DEFAULT_SEED)
    n = 250
    for _ in range(n):
        dets, gts = random_detection_instance(rng, max_dets=8, max_gts=6)
        thr = float(rng.choice([0.5, 0.75]))
        assert match(dets, gts, thr).gt_of_det == reference_greedy_match(dets, gts, thr)
        assert abs(average_precision(dets, gts, thr) - brute_force_ap(dets, gts, thr)) <= 1e-9
        for b, value in zip(SizeBin, size_binned_ap(dets, gts, thr)):
            ignored = [size_bin(g) is not b for g in gts]
            if all(ignored):
                assert value is None
            else:
                assert abs(value - brute_force_ap(dets, gts, thr, ignored)) <= 1e-9
        nms_thr = float(rng.choice([0.3, 0.5, 0.7]))
        assert nms(dets, nms_thr) == brute_force_nms(dets, nms_thr)
    elapsed = time.perf_counter() - t0
    note(f"{n} instances, {elapsed:.1f}s")
    assert elapsed < 30.0


# -- 5: size-bin edges ---------------------------------------------------------------------------------


@pytest.mark.criterion(5)
def test_size_bin_edges():
    assert size_bin_of_area(1024) is SizeBin.SMALL
    assert size_bin_of_area(9216) is SizeBin.MEDIUM
    assert size_bin_of_area(9217) is SizeBin.LARGE
    assert size_bin(BoundingBox(0, 0, 32, 32)) is SizeBin.SMALL
    assert size_bin(BoundingBox(0, 0, 96, 96)) is SizeBin.MEDIUM


# -- 6: VOC round trip and small-box filter ----------------------------------------------------


@pytest.mark.criterion(6)
def test_voc_round_trip_and_filter(note):
    rng = np.random.default_rng(DEFAULT_SEED)
    anns = [random_annotation(rng, i) for i in range(100)]
    for ann in anns:
        assert parse_voc(write_voc(ann)) == ann
    removed = 0
    for before, after in zip(anns, filter_min_size(anns)):
        expected = tuple(b for b in before.boxes if not (b.width < 7 and b.height < 7))
        assert after.boxes == expected
        removed += len(before.boxes) - len(after.boxes)
    note(f"100 round trips, filter removed {removed} boxes")


# -- 7: synthetic size distribution -------------------------------------------------------------


@pytest.mark.criterion(7)
def test_synthetic_bin_proportions(note):
    scenes = generate_dataset(SceneSpec(), 200, DEFAULT_SEED)[0]
    props = dataset_stats(s.annotation for s in scenes).proportions
    target = {"small": 0.227, "medium": 0.677, "large": 0.096}
    note(", ".join(f"{k} {props[k]:.3f}" for k in target))
    for k, v in target.items():
        assert abs(props[k] - v) <= 0.05


# -- 8: small-object trend ------------------------------------------------------------------------------


@pytest.mark.criterion(8)
@pytest.mark.slow
def test_log_gate_small_object_trend(tmp_path, note):
    t0 = time.perf_counter()
    assert run("synth", "--out-dir", tmp_path / "data", "--quiet") == EXIT_OK
    assert run("compare", "--data", tmp_path / "data/manifest.txt", "--precision", "f32", "--out-dir", tmp_path / "cmp", "--quiet") == EXIT_OK
    elapsed = time.perf_counter() - t0
    summary = json.loads((tmp_path / "cmp/comparison.json").read_text())
    table = (tmp_path / "cmp/comparison.txt").read_text()
    print("\n" + table)
    delta = summary["ap_small_delta_log_minus_none"]
    win = "directional win" if summary["directional_win"] else "no directional win"
    note(f"seeds {summary['seeds']}, mean AP^S log {summary['means']['log']['ap_small']:.4f} "
         f"vs none {summary['means']['none']['ap_small']:.4f}, delta {delta:+.4f}, {win}, {elapsed / 60:.1f} min")
    assert len(summary["seeds"]) >= 3
    assert delta >= -0.01
    assert elapsed < 30 * 60


# -- 9: determinism -------------------------------------------------------------------------------------


@pytest.mark.criterion(9)
def test_cli_artifacts_are_byte_identical(tmp_path, note):
    def twice(name, *argv):
        for rep in ("a", "b"):
            assert run(*argv, "--out-dir", tmp_path / rep / name, "--quiet") == EXIT_OK
        assert digest(tmp_path / "a" / name) == digest(tmp_path / "b" / name), name

    twice("synth", "synth", "--n", 6, "--seed", 5)
    data = tmp_path / "a/synth/manifest.txt"
    twice("stats", "stats", "--data", data)
    twice("gradcheck", "gradcheck", "--samples", 200)
    twice("train", "train", "--data", data, "--attention", "log", "--epochs", 2)
    weights = tmp_path / "a/train/weights.bin"
    twice("eval", "eval", "--weights", weights, "--data", data, "--sweep")
    twice("dump", "dump-activations", "--weights", weights, "--image", data.parent / "images/scene_00000.pgm", "--stage", 2)
    twice("compare", "compare", "--data", data, "--seeds", "4,5", "--epochs", 1)
    note("synth, stats, gradcheck, train, eval, dump-activations, compare")
