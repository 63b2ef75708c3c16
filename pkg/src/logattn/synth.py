"""Deterministic synthetic floating-trash scenes with VOC ground truth.

A scene is a water-like background (sinusoidal ripples, bright vertical
reflection streaks, unannotated bubble speckles, sensor noise) with a handful
of non-overlapping objects. Each object's size bin is drawn from ``bin_mix``
and its box is the tight bound of the pixels actually rendered.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import pnm
from .annotations import (
    MEDIUM_MAX_AREA,
    SMALL_MAX_AREA,
    Annotation,
    BoundingBox,
    SizeBin,
    parse_voc,
    read_manifest,
    size_bin,
    write_manifest,
    write_voc,
)
from .rng import child_seeds, make_rng

# Table I counts: 11090 small, 33116 medium, 4692 large
DEFAULT_BIN_MIX = (0.227, 0.677, 0.096)
BINS = (SizeBin.SMALL, SizeBin.MEDIUM, SizeBin.LARGE)
SHAPES = ("ellipse", "rectangle", "polygon")
MANIFEST_NAME = "manifest.txt"


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class Background:
    base_luminance: float = 0.35
    ripple_amplitude: float = 0.04
    reflection_probability: float = 0.3
    bubble_density: float = 4e-4  # expected speckles per pixel


@dataclass(frozen=True)
class SceneSpec:
    image_size: tuple[int, int] = (192, 192)  # (W, H)
    objects_per_image: tuple[int, int] = (1, 5)
    bin_mix: tuple[float, float, float] = DEFAULT_BIN_MIX
    background: Background = field(default_factory=Background)
    shapes: tuple[str, ...] = SHAPES
    contrast: tuple[float, float] = (0.2, 0.5)
    min_area: int = 81
    max_aspect: float = 3.0
    rgb: bool = False
    max_retries: int = 200

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "bin_mix", tuple(float(v) for v in self.bin_mix))
        object.__setattr__(self, "shapes", tuple(self.shapes))
        object.__setattr__(self, "objects_per_image", tuple(int(v) for v in self.objects_per_image))
        object.__setattr__(self, "contrast", tuple(float(v) for v in self.contrast))
        if isinstance(self.background, dict):
            object.__setattr__(self, "background", Background(**self.background))
        w, h = self.image_size
        if w < 32 or h < 32:
            raise ValueError("image sides must be >= 32 px")
        if len(self.bin_mix) != 3 or any(not 0.0 <= p <= 1.0 for p in self.bin_mix):
            raise ValueError("bin_mix needs three proportions in [0, 1]")
        if abs(sum(self.bin_mix) - 1.0) > 1e-9:
            raise ValueError(f"bin_mix must sum to 1, got {sum(self.bin_mix)}")
        lo, hi = self.objects_per_image
        if not 0 <= lo <= hi:
            raise ValueError("objects_per_image must be (min, max) with 0 <= min <= max")
        unknown = set(self.shapes) - set(SHAPES)
        if not self.shapes or unknown:
            raise ValueError(f"shapes must be a non-empty subset of {SHAPES}")
        if not 0 < self.contrast[0] <= self.contrast[1]:
            raise ValueError("contrast must be (lo, hi) with 0 < lo <= hi")
        if self.bin_mix[2] > 0 and (w - 2) * (h - 2) <= MEDIUM_MAX_AREA:
            raise ValueError("image too small to hold large objects")

    def area_range(self, b: SizeBin) -> tuple[float, float]:
        w, h = self.image_size
        if b is SizeBin.SMALL:
            return self.min_area, SMALL_MAX_AREA
        if b is SizeBin.MEDIUM:
            return SMALL_MAX_AREA + 1, MEDIUM_MAX_AREA
        return MEDIUM_MAX_AREA + 1, max(MEDIUM_MAX_AREA + 1, 0.45 * (w - 2) * (h - 2))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)


@dataclass
class LabeledImage:
    pixels: np.ndarray  # uint8, (H, W) or (H, W, 3)
    annotation: Annotation
    masks: list[np.ndarray] = field(default_factory=list)  # per box, cropped to the box; not serialized

    def to_chw(self, dtype=np.float64) -> np.ndarray:
        arr = self.pixels.astype(dtype) / 255.0
        return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)


# -- shapes ----------------------------------------------------------------------------


def _ellipse(h: int, w: int, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    return ((xx - w / 2) / (w / 2)) ** 2 + ((yy - h / 2) / (h / 2)) ** 2 <= 1.0


def _rectangle(h: int, w: int, rng) -> np.ndarray:
    return np.ones((h, w), dtype=bool)


def _polygon(h: int, w: int, rng) -> np.ndarray:
    n = int(rng.integers(5, 10))
    angles = np.sort(rng.uniform(0, 2 * np.pi, n))
    radii = rng.uniform(0.55, 1.0, n)
    px = w / 2 + radii * np.cos(angles) * w / 2
    py = h / 2 + radii * np.sin(angles) * h / 2
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    inside = np.zeros((h, w), dtype=bool)
    # even-odd rule over edges
    for i in range(n):
        x0, y0, x1, y1 = px[i], py[i], px[(i + 1) % n], py[(i + 1) % n]
        if y0 == y1:
            continue
        crosses = (y0 > yy) != (y1 > yy)
        x_at = x0 + (yy - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (xx < x_at)
    return inside


_RENDERERS = {"ellipse": _ellipse, "rectangle": _rectangle, "polygon": _polygon}


def _crop(mask: np.ndarray) -> np.ndarray | None:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return mask[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]


def sample_object_mask(spec: SceneSpec, b: SizeBin, rng: np.random.Generator, shrink: float = 1.0) -> np.ndarray:
    """A tightly cropped boolean mask whose bounding-box area lies in bin ``b``.

    ``shrink`` in (0, 1] narrows the log-area range toward the bin's lower end.
    """
    w_img, h_img = spec.image_size
    lo, hi = spec.area_range(b)
    hi = lo * (hi / lo) ** shrink
    for _ in range(spec.max_retries):
        area = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        aspect = math.exp(rng.uniform(-math.log(spec.max_aspect), math.log(spec.max_aspect)))
        w = min(max(round(math.sqrt(area * aspect)), 3), w_img - 2)
        h = min(max(round(area / max(w, 1)), 3), h_img - 2)
        shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
        mask = _crop(_RENDERERS[shape](h, w, rng))
        if mask is None:
            continue
        mh, mw = mask.shape
        if size_bin(BoundingBox(0, 0, mw, mh)) is b and mh * mw >= spec.min_area:
            return mask
    raise PlacementError(f"could not sample a {b.value} object for image size {spec.image_size}")


# -- scenes ----------------------------------------------------------------------------


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    w, h = spec.image_size
    bg = spec.background
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    lum = np.full((h, w), bg.base_luminance)
    for _ in range(2):
        lx, ly = rng.uniform(20, 60, 2)
        phase = rng.uniform(0, 2 * np.pi)
        lum += bg.ripple_amplitude / 2 * np.sin(2 * np.pi * (xx / lx + yy / ly) + phase)
    lum += rng.uniform(-0.05, 0.05) * (yy / h - 0.5)
    if rng.random() < bg.reflection_probability:
        for _ in range(int(rng.integers(1, 4))):
            center = rng.uniform(0, w)
            half = rng.uniform(1.5, 6)
            strength = rng.uniform(0.08, 0.2)
            lum += strength * np.exp(-0.5 * ((xx - center) / half) ** 2)
    return lum


def _add_bubbles(lum: np.ndarray, density: float, rng: np.random.Generator) -> None:
    h, w = lum.shape
    for _ in range(int(rng.poisson(density * h * w))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(0.6, 1.6)
        y0, y1 = max(int(cy - 2), 0), min(int(cy + 3), h)
        x0, x1 = max(int(cx - 2), 0), min(int(cx + 3), w)
        yy, xx = np.mgrid[y0:y1, x0:x1] + 0.5
        lum[y0:y1, x0:x1] += 0.35 * (((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r)


def _free_positions(occupied: np.ndarray, mh: int, mw: int) -> np.ndarray:
    """Top-left (y, x) positions where an mh x mw box touches no occupied pixel."""
    h, w = occupied.shape
    if mh > h or mw > w:
        return np.empty((0, 2), dtype=np.int64)
    integral = np.zeros((h + 1, w + 1), dtype=np.int64)
    integral[1:, 1:] = occupied.cumsum(0).cumsum(1)
    sums = integral[mh:, mw:] - integral[:-mh, mw:] - integral[mh:, :-mw] + integral[:-mh, :-mw]
    return np.argwhere(sums == 0)


def _layout(spec: SceneSpec, bins: list[SizeBin], rng: np.random.Generator, image_id: str):
    """Disjoint (box, mask) pairs for the requested bins, largest first.

    A failed placement restarts the whole layout with the same bins but
    smaller objects within each bin, so the bin mix is not biased against
    large objects.
    """
    w, h = spec.image_size
    order = sorted(bins, key=lambda b: -BINS.index(b))
    for attempt in range(spec.max_retries):
        layout: list[tuple[tuple[int, int, int, int], np.ndarray]] = []
        occupied = np.zeros((h, w), dtype=bool)
        for b in order:
            for _ in range(10):
                mask = sample_object_mask(spec, b, rng, 0.97**attempt)
                free = _free_positions(occupied, *mask.shape)
                if len(free) == 0:
                    mask = mask.T
                    free = _free_positions(occupied, *mask.shape)
                if len(free):
                    break
            else:
                break
            mh, mw = mask.shape
            y0, x0 = (int(v) for v in free[rng.integers(len(free))])
            layout.append(((x0, y0, x0 + mw, y0 + mh), mask))
            # one-pixel margin keeps objects from touching
            occupied[max(y0 - 1, 0) : y0 + mh + 1, max(x0 - 1, 0) : x0 + mw + 1] = True
        else:
            return layout
    raise PlacementError(f"{image_id}: could not place {len(bins)} objects; spec too dense")


def sample_bins(spec: SceneSpec, count: int, rng: np.random.Generator) -> list[SizeBin]:
    return [BINS[i] for i in rng.choice(3, size=count, p=spec.bin_mix)]


def generate_scene(spec: SceneSpec, seed: int, image_id: str = "scene") -> LabeledImage:
    rng = make_rng(seed)
    w, h = spec.image_size
    lum = _background(spec, rng)
    tint = np.empty((h, w, 3))
    tint[:] = (0.85, 1.0, 0.75)  # murky green-brown water

    lo, hi = spec.objects_per_image
    count = int(rng.integers(lo, hi + 1))
    bins = sample_bins(spec, count, rng)
    layout = _layout(spec, bins, rng, image_id)
    boxes = [BoundingBox(*box) for box, _ in layout]
    masks = [mask for _, mask in layout]
    for (x0, y0, x1, y1), mask in layout:
        region = lum[y0:y1, x0:x1]
        sign = 1.0 if rng.random() < 0.7 else -1.0
        value = float(region.mean()) + sign * rng.uniform(*spec.contrast)
        texture = rng.normal(0.0, 0.03, mask.shape)
        region[mask] = value + texture[mask]
        tint[y0:y1, x0:x1][mask] = rng.uniform(0.6, 1.2, 3)

    _add_bubbles(lum, spec.background.bubble_density, rng)
    lum += rng.normal(0.0, 0.015, lum.shape)
    if spec.rgb:
        pixels = np.clip(lum[..., None] * tint, 0.0, 1.0)
    else:
        pixels = np.clip(lum, 0.0, 1.0)
    pixels = np.round(pixels * 255.0).astype(np.uint8)
    return LabeledImage(pixels, Annotation(image_id, w, h, tuple(boxes)), masks)


def generate_dataset(
    spec: SceneSpec,
    n_images: int,
    seed: int,
    out_dir: str | os.PathLike | None = None,
) -> tuple[list[LabeledImage], list[tuple[str, str]]]:
    """``n_images`` scenes with per-image sub-seeds; optionally written to ``out_dir``.

    Returns the scenes and the manifest entries (paths relative to ``out_dir``).
    """
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    ext = "ppm" if spec.rgb else "pgm"
    scenes, manifest = [], []
    for i, sub in enumerate(child_seeds(seed, n_images)):
        image_id = f"scene_{i:05d}"
        scenes.append(generate_scene(spec, sub, image_id))
        manifest.append((f"images/{image_id}.{ext}", f"annotations/{image_id}.xml"))
    if out_dir is not None:
        write_dataset(out_dir, scenes, manifest)
    return scenes, manifest


def write_dataset(out_dir, scenes: Sequence[LabeledImage], manifest: Sequence[tuple[str, str]]) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    for scene, (img_rel, xml_rel) in zip(scenes, manifest):
        pnm.write(out / img_rel, scene.pixels)
        depth = 3 if scene.pixels.ndim == 3 else 1
        (out / xml_rel).write_text(write_voc(scene.annotation, Path(img_rel).name, depth))
    path = out / MANIFEST_NAME
    write_manifest(path, manifest)
    return path


def load_dataset(manifest: str | os.PathLike) -> list[LabeledImage]:
    return [LabeledImage(pnm.read(img), parse_voc(xml.read_text())) for img, xml in read_manifest(manifest)]


def load_spec(path: str | os.PathLike) -> SceneSpec:
    return SceneSpec.from_dict(json.loads(Path(path).read_text()))
