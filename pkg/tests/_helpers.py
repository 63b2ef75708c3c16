"""Random instance generators shared by the unit and acceptance tests."""

from fractions import Fraction

import numpy as np

from logattn.annotations import SUBSETS, Annotation, BoundingBox
from logattn.evaluation import Detection, iou


def random_box(rng, width, height, max_side=None):
    max_side = max_side or max(width, height)
    w = int(rng.integers(1, min(width, max_side) + 1))
    h = int(rng.integers(1, min(height, max_side) + 1))
    x0 = int(rng.integers(0, width - w + 1))
    y0 = int(rng.integers(0, height - h + 1))
    return BoundingBox(x0, y0, x0 + w, y0 + h)


def random_annotation(rng, index=0):
    width, height = (int(v) for v in rng.integers(8, 400, 2))
    n = int(rng.integers(0, 7))
    subset = [None, *SUBSETS][int(rng.integers(0, len(SUBSETS) + 1))]
    boxes = tuple(random_box(rng, width, height) for _ in range(n))
    return Annotation(f"img_{index:04d}", width, height, boxes, subset)


def random_detection_instance(rng, max_dets=8, max_gts=6, size=64, clustered=True):
    """Boxes drawn near a few anchors so that overlaps and ties are common."""
    n_gt = int(rng.integers(0, max_gts + 1))
    n_det = int(rng.integers(0, max_dets + 1))
    gts = [random_box(rng, size, size, 40) for _ in range(n_gt)]
    dets = []
    for _ in range(n_det):
        if clustered and gts and rng.random() < 0.7:
            g = gts[int(rng.integers(len(gts)))]
            jit = rng.integers(-3, 4, 4)
            x0 = int(np.clip(g.xmin + jit[0], 0, size - 2))
            y0 = int(np.clip(g.ymin + jit[1], 0, size - 2))
            x1 = int(np.clip(g.xmax + jit[2], x0 + 1, size))
            y1 = int(np.clip(g.ymax + jit[3], y0 + 1, size))
            box = BoundingBox(x0, y0, x1, y1)
        else:
            box = random_box(rng, size, size, 40)
        # a coarse score grid makes ties likely
        dets.append(Detection(box, float(rng.integers(0, 6)) / 5))
    return dets, gts


def reference_greedy_match(dets, gts, thr):
    """Exact-arithmetic greedy matching written independently of ``match``."""
    def exact(a, b):
        iw = max(0, min(a.xmax, b.xmax) - max(a.xmin, b.xmin))
        ih = max(0, min(a.ymax, b.ymax) - max(a.ymin, b.ymin))
        inter = Fraction(iw * ih)
        return inter / (a.area + b.area - inter)

    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    free = set(range(len(gts)))
    out = [None] * len(dets)
    for i in order:
        best = None
        for j in sorted(free):
            v = exact(dets[i].box, gts[j])
            if v >= Fraction(thr) and (best is None or v > best[0]):
                best = (v, j)
        if best is not None:
            out[i] = best[1]
            free.discard(best[1])
    return out


def brute_force_nms(dets, thr):
    """Keep a detection iff no higher-ranked kept detection overlaps it above thr."""
    ranked = sorted(enumerate(dets), key=lambda p: (-p[1].score, p[0]))
    keep = []
    for i, d in ranked:
        suppressed = any(iou(d.box, dets[k].box) > thr for k in keep)
        if not suppressed:
            keep.append(i)
    return [dets[i] for i in keep]
