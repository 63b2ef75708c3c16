"""Pascal VOC box annotations, COCO size bins, filtering, splitting and stats.

Coordinates are raw pixel values with ``area = (xmax - xmin) * (ymax - ymin)``;
no +1 correction is applied, so a 32x32 box has area exactly 32**2.
"""

from __future__ import annotations

import enum
import math
import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence, TypeVar

from .rng import make_rng

CLASS_NAME = "trash"
SMALL_MAX_AREA = 32**2
MEDIUM_MAX_AREA = 96**2
MIN_SIDE = 7
SUBSETS = ("easy", "hard")

T = TypeVar("T")


class AnnotationError(ValueError):
    pass


class MalformedXML(AnnotationError):
    pass


class MissingField(AnnotationError):
    pass


class InvertedBox(AnnotationError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if self.xmax <= self.xmin or self.ymax <= self.ymin:
            raise InvertedBox(f"inverted or empty box {self.as_tuple()}")
        if min(self.xmin, self.ymin) < 0:
            raise AnnotationError(f"negative coordinate in box {self.as_tuple()}")

    @property
    def width(self):
        return self.xmax - self.xmin

    @property
    def height(self):
        return self.ymax - self.ymin

    @property
    def area(self):
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.xmin + self.xmax) / 2, (self.ymin + self.ymax) / 2

    def as_tuple(self) -> tuple:
        return (self.xmin, self.ymin, self.xmax, self.ymax)


@dataclass(frozen=True)
class Annotation:
    image_id: str
    width: int
    height: int
    boxes: tuple[BoundingBox, ...] = ()
    subset: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        if self.width <= 0 or self.height <= 0:
            raise AnnotationError(f"{self.image_id}: image size must be positive")
        if self.subset is not None and self.subset not in SUBSETS:
            raise AnnotationError(f"{self.image_id}: unknown subset {self.subset!r}")
        for b in self.boxes:
            if b.xmax > self.width or b.ymax > self.height:
                raise AnnotationError(f"{self.image_id}: box {b.as_tuple()} outside {self.width}x{self.height}")


class SizeBin(str, enum.Enum):
    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"


def size_bin_of_area(area: float) -> SizeBin:
    if area <= SMALL_MAX_AREA:
        return SizeBin.SMALL
    if area <= MEDIUM_MAX_AREA:
        return SizeBin.MEDIUM
    return SizeBin.LARGE


def size_bin(box: BoundingBox) -> SizeBin:
    return size_bin_of_area(box.area)


# -- VOC XML --------------------------------------------------------------------


def _int_field(parent: ET.Element, path: str, where: str) -> int:
    node = parent.find(path)
    if node is None or node.text is None or not node.text.strip():
        raise MissingField(f"missing <{path}> in {where}")
    text = node.text.strip()
    try:
        value = float(text)
    except ValueError:
        raise AnnotationError(f"<{path}> in {where} is not a number: {text!r}") from None
    if not value.is_integer():
        raise AnnotationError(f"<{path}> in {where} is not an integer: {text!r}")
    return int(value)


def parse_voc(xml_text: str) -> Annotation:
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        raise MalformedXML(str(exc)) from None
    if root.tag != "annotation":
        raise MalformedXML(f"root element is <{root.tag}>, expected <annotation>")

    filename = root.findtext("filename")
    image_id = Path(filename.strip()).stem if filename and filename.strip() else ""
    size = root.find("size")
    if size is None:
        raise MissingField("missing <size>")
    width = _int_field(size, "width", "size")
    height = _int_field(size, "height", "size")

    boxes = []
    for i, obj in enumerate(root.findall("object")):
        bnd = obj.find("bndbox")
        if bnd is None:
            raise MissingField(f"missing <bndbox> in object {i}")
        coords = [_int_field(bnd, k, f"object {i}") for k in ("xmin", "ymin", "xmax", "ymax")]
        boxes.append(BoundingBox(*coords))

    subset = root.findtext("subset")
    subset = subset.strip() if subset and subset.strip() else None
    return Annotation(image_id, width, height, tuple(boxes), subset)


def write_voc(ann: Annotation, filename: str | None = None, depth: int = 1) -> str:
    root = ET.Element("annotation")
    ET.SubElement(root, "folder").text = "images"
    ET.SubElement(root, "filename").text = filename or f"{ann.image_id}.pgm"
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(ann.width)
    ET.SubElement(size, "height").text = str(ann.height)
    ET.SubElement(size, "depth").text = str(depth)
    ET.SubElement(root, "segmented").text = "0"
    if ann.subset is not None:
        ET.SubElement(root, "subset").text = ann.subset
    for b in ann.boxes:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = CLASS_NAME
        ET.SubElement(obj, "pose").text = "Unspecified"
        ET.SubElement(obj, "truncated").text = "0"
        ET.SubElement(obj, "difficult").text = "0"
        bnd = ET.SubElement(obj, "bndbox")
        for key, value in zip(("xmin", "ymin", "xmax", "ymax"), b.as_tuple()):
            ET.SubElement(bnd, key).text = str(int(value))
    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"


# -- dataset transforms -----------------------------------------------------------


def filter_min_size(anns: Iterable[Annotation], min_side: int = MIN_SIDE) -> list[Annotation]:
    """Drop boxes that are narrower AND shorter than ``min_side`` pixels."""
    out = []
    for a in anns:
        kept = tuple(b for b in a.boxes if not (b.width < min_side and b.height < min_side))
        out.append(replace(a, boxes=kept))
    return out


def split_train_val(items: Sequence[T], ratio: float, seed: int) -> tuple[list[T], list[T]]:
    """Seeded shuffle; the first ceil(ratio * n) items go to train, the rest to val."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must be in (0, 1)")
    n = len(items)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    n_train = math.ceil(round(ratio * n, 9))
    order = make_rng(seed).permutation(n)
    train = [items[i] for i in order[:n_train]]
    val = [items[i] for i in order[n_train:]]
    return train, val


@dataclass
class DatasetStats:
    images: int = 0
    objects: int = 0
    counts: dict[str, int] = field(default_factory=lambda: {b.value: 0 for b in SizeBin})
    area_min: float | None = None
    area_max: float | None = None

    @property
    def proportions(self) -> dict[str, float]:
        if not self.objects:
            return {k: 0.0 for k in self.counts}
        return {k: v / self.objects for k, v in self.counts.items()}

    def to_dict(self) -> dict:
        return {
            "images": self.images,
            "objects": self.objects,
            "counts": dict(self.counts),
            "proportions": self.proportions,
            "area_min": self.area_min,
            "area_max": self.area_max,
        }


def dataset_stats(anns: Iterable[Annotation]) -> DatasetStats:
    stats = DatasetStats()
    areas = []
    for a in anns:
        stats.images += 1
        for b in a.boxes:
            stats.counts[size_bin(b).value] += 1
            areas.append(b.area)
    stats.objects = len(areas)
    if areas:
        stats.area_min, stats.area_max = min(areas), max(areas)
    return stats


def stats_report(anns: Sequence[Annotation], min_side: int = MIN_SIDE) -> dict:
    """Stats before and after the minimum-size filter."""
    return {
        "unfiltered": dataset_stats(anns).to_dict(),
        "filtered": dataset_stats(filter_min_size(anns, min_side)).to_dict(),
        "min_side": min_side,
    }


# -- manifests --------------------------------------------------------------------


def read_manifest(path: str | os.PathLike) -> list[tuple[Path, Path]]:
    """Pairs of (image, xml) paths; relative entries resolve against the manifest's folder."""
    path = Path(path)
    base = path.parent
    pairs = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise AnnotationError(f"{path}:{lineno}: expected 'image<TAB>xml'")
        pairs.append((base / parts[0], base / parts[1]))
    return pairs


def write_manifest(path: str | os.PathLike, pairs: Iterable[tuple[str, str]]) -> None:
    lines = [f"{img}\t{xml}\n" for img, xml in pairs]
    Path(path).write_text("".join(lines))


def load_annotations(manifest: str | os.PathLike) -> list[Annotation]:
    return [parse_voc(xml.read_text()) for _, xml in read_manifest(manifest)]
