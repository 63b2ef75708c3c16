"""COCO-style single-class detection scoring.

Detections are matched greedily in descending score order (ties by input
index) to the unmatched ground truth of highest IoU at or above the threshold.
AP is the mean of the interpolated precision envelope sampled at 101 recall
levels, or at 11 levels for the VOC variant. Size-binned AP restricts ground
truths to one area bin; a detection whose match is an out-of-bin ground
truth is ignored rather than counted as a false positive.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .annotations import BoundingBox, SizeBin, size_bin

DEFAULT_IOU_THRESHOLD = 0.5
COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
INTERPOLATIONS = {"coco101": 101, "voc11": 11}


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    ih = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


@dataclass
class MatchResult:
    order: list[int]  # detection indices in processing order
    gt_of_det: list[int | None]  # matched ground-truth index per detection
    iou_of_det: list[float]  # IoU with the matched ground truth, 0 if unmatched
    det_ignored: list[bool]  # matched an ignored ground truth
    gt_ignored: list[bool]

    @property
    def tp(self) -> int:
        return sum(1 for g, ign in zip(self.gt_of_det, self.det_ignored) if g is not None and not ign)

    @property
    def fp(self) -> int:
        return sum(1 for g in self.gt_of_det if g is None)

    @property
    def fn(self) -> int:
        matched = {g for g in self.gt_of_det if g is not None}
        return sum(1 for j, ign in enumerate(self.gt_ignored) if not ign and j not in matched)

    @property
    def tp_ious(self) -> list[float]:
        return [
            v for g, v, ign in zip(self.gt_of_det, self.iou_of_det, self.det_ignored) if g is not None and not ign
        ]


def _rank(dets: Sequence[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))


def match(
    dets: Sequence[Detection],
    gts: Sequence[BoundingBox],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    gt_ignored: Sequence[bool] | None = None,
) -> MatchResult:
    """Greedy score-ordered matching. Ignored ground truths are only used
    when no regular ground truth clears the threshold."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("iou_threshold must be in (0, 1]")
    ignored = list(gt_ignored) if gt_ignored is not None else [False] * len(gts)
    if len(ignored) != len(gts):
        raise ValueError("gt_ignored must have one flag per ground truth")
    ious = np.array([[iou(d.box, g) for g in gts] for d in dets]).reshape(len(dets), len(gts))
    taken = [False] * len(gts)
    order = _rank(dets)
    gt_of_det: list[int | None] = [None] * len(dets)
    iou_of_det = [0.0] * len(dets)
    det_ignored = [False] * len(dets)
    for i in order:
        for want_ignored in (False, True):
            best, best_iou = None, -1.0
            for j in range(len(gts)):
                if taken[j] or ignored[j] != want_ignored:
                    continue
                if ious[i, j] >= iou_threshold and ious[i, j] > best_iou:
                    best, best_iou = j, ious[i, j]
            if best is not None:
                taken[best] = True
                gt_of_det[i] = best
                iou_of_det[i] = float(best_iou)
                det_ignored[i] = want_ignored
                break
    return MatchResult(order, gt_of_det, iou_of_det, det_ignored, ignored)


# -- AP core ------------------------------------------------------------------------


@dataclass
class _Ranked:
    tp: np.ndarray  # cumulative true positives at each rank
    fp: np.ndarray
    n_gt: int


def _ranked(matches: Sequence[MatchResult], per_image_dets: Sequence[Sequence[Detection]]) -> _Ranked:
    records = []
    n_gt = 0
    for img, (m, dets) in enumerate(zip(matches, per_image_dets)):
        n_gt += sum(1 for ign in m.gt_ignored if not ign)
        for i, d in enumerate(dets):
            if m.det_ignored[i]:
                continue
            records.append((-d.score, img, i, m.gt_of_det[i] is not None))
    records.sort()
    hits = np.array([r[3] for r in records], dtype=np.int64)
    return _Ranked(np.cumsum(hits), np.cumsum(1 - hits), n_gt)


def _ap_from_ranked(r: _Ranked, points: int = 101) -> float:
    if r.n_gt == 0:
        return 1.0 if len(r.tp) == 0 else 0.0
    if len(r.tp) == 0:
        return 0.0
    precision = r.tp / (r.tp + r.fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    steps = points - 1
    for k in range(points):
        # first rank with recall >= k/steps, compared in integers
        idx = np.searchsorted(r.tp * steps, k * r.n_gt, side="left")
        if idx < len(envelope):
            total += envelope[idx]
    return total / points


def pr_points(r: _Ranked) -> list[tuple[float, float]]:
    if r.n_gt == 0 or len(r.tp) == 0:
        return []
    recall = r.tp / r.n_gt
    precision = r.tp / (r.tp + r.fp)
    return [(float(a), float(b)) for a, b in zip(recall, precision)]


def _points(interpolation: str) -> int:
    try:
        return INTERPOLATIONS[interpolation]
    except KeyError:
        raise ValueError(f"unknown interpolation {interpolation!r}; choose from {sorted(INTERPOLATIONS)}") from None


def dataset_average_precision(
    per_image_dets: Sequence[Sequence[Detection]],
    per_image_gts: Sequence[Sequence[BoundingBox]],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    interpolation: str = "coco101",
) -> float:
    matches = [match(d, g, iou_threshold) for d, g in zip(per_image_dets, per_image_gts)]
    return _ap_from_ranked(_ranked(matches, per_image_dets), _points(interpolation))


def average_precision(
    dets: Sequence[Detection],
    gts: Sequence[BoundingBox],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    interpolation: str = "coco101",
) -> float:
    return dataset_average_precision([dets], [gts], iou_threshold, interpolation)


def dataset_size_binned_ap(
    per_image_dets: Sequence[Sequence[Detection]],
    per_image_gts: Sequence[Sequence[BoundingBox]],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    interpolation: str = "coco101",
) -> dict[SizeBin, float | None]:
    """AP per size bin; ``None`` for a bin with no ground truths."""
    points = _points(interpolation)
    out: dict[SizeBin, float | None] = {}
    for b in SizeBin:
        flags = [[size_bin(g) is not b for g in gts] for gts in per_image_gts]
        if all(all(f) for f in flags):
            out[b] = None
            continue
        matches = [match(d, g, iou_threshold, f) for d, g, f in zip(per_image_dets, per_image_gts, flags)]
        out[b] = _ap_from_ranked(_ranked(matches, per_image_dets), points)
    return out


def size_binned_ap(dets, gts, iou_threshold=DEFAULT_IOU_THRESHOLD, interpolation="coco101"):
    """(small, medium, large) AP for one image; empty bins give ``None``."""
    res = dataset_size_binned_ap([dets], [gts], iou_threshold, interpolation)
    return res[SizeBin.SMALL], res[SizeBin.MEDIUM], res[SizeBin.LARGE]


def ap_sweep(per_image_dets, per_image_gts, thresholds=COCO_THRESHOLDS, interpolation="coco101") -> float:
    """AP averaged over IoU thresholds (AP@[.5:.95] by default)."""
    vals = [dataset_average_precision(per_image_dets, per_image_gts, t, interpolation) for t in thresholds]
    return float(np.mean(vals))


def mean_iou(matches: MatchResult | Sequence[MatchResult]) -> float | None:
    if isinstance(matches, MatchResult):
        matches = [matches]
    values = [v for m in matches for v in m.tp_ious]
    return float(np.mean(values)) if values else None


# -- reports --------------------------------------------------------------------------


@dataclass
class EvalReport:
    ap: float
    mean_iou: float | None
    ap_small: float | None
    ap_medium: float | None
    ap_large: float | None
    counts: dict[str, int]
    iou_threshold: float = DEFAULT_IOU_THRESHOLD
    interpolation: str = "coco101"
    ap_sweep: float | None = None
    pr_points: list[tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pr_points"] = [list(p) for p in self.pr_points]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def pr_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["recall", "precision"])
        for r, p in self.pr_points:
            w.writerow([repr(r), repr(p)])
        return buf.getvalue()


def evaluate(
    per_image_dets: Sequence[Sequence[Detection]],
    per_image_gts: Sequence[Sequence[BoundingBox]],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    interpolation: str = "coco101",
    sweep: bool = False,
) -> EvalReport:
    if len(per_image_dets) != len(per_image_gts):
        raise ValueError("need one detection list per image")
    matches = [match(d, g, iou_threshold) for d, g in zip(per_image_dets, per_image_gts)]
    ranked = _ranked(matches, per_image_dets)
    binned = dataset_size_binned_ap(per_image_dets, per_image_gts, iou_threshold, interpolation)
    return EvalReport(
        ap=_ap_from_ranked(ranked, _points(interpolation)),
        mean_iou=mean_iou(matches),
        ap_small=binned[SizeBin.SMALL],
        ap_medium=binned[SizeBin.MEDIUM],
        ap_large=binned[SizeBin.LARGE],
        counts={"tp": sum(m.tp for m in matches), "fp": sum(m.fp for m in matches), "fn": sum(m.fn for m in matches)},
        iou_threshold=iou_threshold,
        interpolation=interpolation,
        ap_sweep=ap_sweep(per_image_dets, per_image_gts, interpolation=interpolation) if sweep else None,
        pr_points=pr_points(ranked),
    )


COMPARISON_COLUMNS = ("ap", "mean_iou", "ap_small", "ap_medium", "ap_large")


def _pct(v: float | None) -> str:
    return "n/a" if v is None else f"{100 * v:.1f}"


def comparison_csv(rows: Sequence[tuple[str, dict]]) -> str:
    """rows of (label, {column: fraction or None}); fractions written as-is."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", *COMPARISON_COLUMNS])
    for label, vals in rows:
        w.writerow([label, *("n/a" if vals.get(c) is None else repr(float(vals[c])) for c in COMPARISON_COLUMNS)])
    return buf.getvalue()


def comparison_table(rows: Sequence[tuple[str, dict]]) -> str:
    """Aligned text table in percent with one decimal."""
    header = ["Model", "AP", "IoU", "AP^S", "AP^M", "AP^L"]
    body = [[label, *(_pct(vals.get(c)) for c in COMPARISON_COLUMNS)] for label, vals in rows]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = []
    for r in [header, *body]:
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"


# -- brute-force oracle -----------------------------------------------------------------

ORACLE_MAX_DETECTIONS = 10


def _exact_iou(a: BoundingBox, b: BoundingBox) -> Fraction:
    ax0, ay0, ax1, ay1 = (Fraction(v) for v in a.as_tuple())
    bx0, by0, bx1, by1 = (Fraction(v) for v in b.as_tuple())
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return Fraction(0)
    inter = iw * ih
    return inter / ((ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter)


def brute_force_ap(
    dets: Sequence[Detection],
    gts: Sequence[BoundingBox],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    gt_ignored: Sequence[bool] | None = None,
    points: int = 101,
) -> float:
    """Reference AP by direct enumeration in exact arithmetic.

    Walks the ranked detections, writes out the full confusion sequence,
    then for every sampled recall level takes the best precision at any
    rank reaching that recall.
    """
    if len(dets) > ORACLE_MAX_DETECTIONS:
        raise ValueError(f"oracle handles at most {ORACLE_MAX_DETECTIONS} detections")
    ignored = list(gt_ignored) if gt_ignored is not None else [False] * len(gts)
    thr = Fraction(iou_threshold)
    ranked = sorted(enumerate(dets), key=lambda p: (-p[1].score, p[0]))
    used = set()
    sequence = []  # "tp" / "fp" per counted detection, in rank order
    for _, d in ranked:
        choice = None
        for pass_ignored in (False, True):
            cands = [(_exact_iou(d.box, g), -j, j) for j, g in enumerate(gts) if j not in used and ignored[j] == pass_ignored]
            cands = [c for c in cands if c[0] >= thr]
            if cands:
                choice = max(cands)
                break
        if choice is None:
            sequence.append("fp")
            continue
        used.add(choice[2])
        if not ignored[choice[2]]:
            sequence.append("tp")

    n_gt = sum(1 for f in ignored if not f)
    if n_gt == 0:
        return 1.0 if not sequence else 0.0
    curve = []
    tp = fp = 0
    for s in sequence:
        tp += s == "tp"
        fp += s == "fp"
        curve.append((Fraction(tp, n_gt), Fraction(tp, tp + fp)))
    total = Fraction(0)
    for k in range(points):
        level = Fraction(k, points - 1)
        reaching = [p for r, p in curve if r >= level]
        total += max(reaching) if reaching else 0
    return float(total / points)
