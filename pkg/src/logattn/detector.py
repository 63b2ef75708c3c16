"""Tiny single-class grid detector with optional attention gates in the backbone.

Each backbone stage is ``conv3x3 -> ReLU -> (maxpool 2x2)``; when a stage index
is listed in ``attention_after_stage`` its output is replaced by the gated
output before the next stage consumes it. A 1x1 convolution head predicts,
per grid cell, one objectness logit and a box ``(cx, cy, w, h)`` where the
centre is an offset inside the cell and the size is the natural log of the
box side in cell units (0 means one cell).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .annotations import Annotation, BoundingBox
from .attention import AttentionKind, apply_gate
from .evaluation import Detection, iou
from .rng import DEFAULT_SEED, child_seeds, make_rng
from .tensor import Node

WEIGHTS_FORMAT = "logattn-weights-v1"
DEFAULT_CONF_THRESHOLD = 0.3
DEFAULT_NMS_THRESHOLD = 0.5


class TrainingDiverged(ArithmeticError):
    """Raised when a batch loss stops being finite."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    stages: tuple[tuple[int, bool], ...] = ((8, True), (16, True), (24, False), (24, False))
    attention_after_stage: frozenset[int] = frozenset()
    attention_kind: AttentionKind = AttentionKind.LOG
    in_channels: int = 1
    input_size: tuple[int, int] = (192, 192)  # (H, W)

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple((int(c), bool(d)) for c, d in self.stages))
        object.__setattr__(self, "attention_after_stage", frozenset(int(i) for i in self.attention_after_stage))
        object.__setattr__(self, "attention_kind", AttentionKind(self.attention_kind))
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if not self.stages:
            raise ConfigError("need at least one backbone stage")
        if any(c < 1 for c, _ in self.stages):
            raise ConfigError("stage channels must be positive")
        bad = sorted(i for i in self.attention_after_stage if not 0 <= i < len(self.stages))
        if bad:
            raise ConfigError(f"invalid attention stage index {bad}; backbone has {len(self.stages)} stages")
        h, w = self.input_size
        if h % self.stride or w % self.stride:
            raise ConfigError(f"input size {self.input_size} not divisible by total stride {self.stride}")

    @property
    def stride(self) -> int:
        return 2 ** sum(1 for _, d in self.stages if d)

    @property
    def grid_size(self) -> tuple[int, int]:
        return self.input_size[0] // self.stride, self.input_size[1] // self.stride

    def to_dict(self) -> dict:
        return {
            "stages": [[c, d] for c, d in self.stages],
            "attention_after_stage": sorted(self.attention_after_stage),
            "attention_kind": self.attention_kind.value,
            "in_channels": self.in_channels,
            "input_size": list(self.input_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(
            stages=tuple((c, dn) for c, dn in d["stages"]),
            attention_after_stage=frozenset(d["attention_after_stage"]),
            attention_kind=AttentionKind(d["attention_kind"]),
            in_channels=d["in_channels"],
            input_size=tuple(d["input_size"]),
        )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.02
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 8
    seed: int = DEFAULT_SEED
    objectness_loss_weight: float = 1.0
    box_loss_weight: float = 1.0
    dtype: str = "f64"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("need learning_rate >= 0 and momentum in [0, 1)")
        if self.objectness_loss_weight < 0 or self.box_loss_weight < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError("dtype must be 'f32' or 'f64'")


def _np_dtype(name: str):
    return np.float32 if name == "f32" else np.float64


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Variance-preserving init for ReLU layers.

    Keeps stage outputs near unit scale; smaller activations would be squashed
    towards zero by the log gate, which is quadratic near the origin.
    """
    _, c, kh, kw = shape
    bound = math.sqrt(6.0 / (c * kh * kw))
    return rng.uniform(-bound, bound, size=shape)


class Detector:
    def __init__(self, config: BackboneConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = {name: Node(value, name=name) for name, value in params.items()}

    @property
    def dtype(self):
        return next(iter(self.params.values())).value.dtype

    def astype(self, dtype) -> "Detector":
        return Detector(self.config, {k: p.value.astype(dtype) for k, p in self.params.items()})

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def forward(self, images: Node) -> tuple[Node, list[Node]]:
        """Returns the raw head output (N,5,Gh,Gw) and the per-stage features."""
        # pixels arrive in [0, 1]; centre them
        x = T.scalar_add(T.scalar_mul(images, 2.0), -1.0)
        feats = []
        for i, (_, down) in enumerate(self.config.stages):
            x = T.conv2d(x, self.params[f"stage{i}.weight"], stride=1, pad=1, bias=self.params[f"stage{i}.bias"])
            x = T.relu(x)
            if down:
                x = T.maxpool2d(x, 2, 2)
            if i in self.config.attention_after_stage:
                x = apply_gate(self.config.attention_kind, x)
            feats.append(x)
        head = T.conv2d(x, self.params["head.weight"], bias=self.params["head.bias"])
        return head, feats


def build_detector(config: BackboneConfig, seed: int = DEFAULT_SEED, dtype=np.float64) -> Detector:
    rng = make_rng(seed)
    params = {}
    c_in = config.in_channels
    for i, (c_out, _) in enumerate(config.stages):
        params[f"stage{i}.weight"] = he_uniform(rng, (c_out, c_in, 3, 3)).astype(dtype)
        params[f"stage{i}.bias"] = np.zeros(c_out, dtype=dtype)
        c_in = c_out
    params["head.weight"] = he_uniform(rng, (5, c_in, 1, 1)).astype(dtype)
    params["head.bias"] = np.zeros(5, dtype=dtype)
    return Detector(config, params)


def _batch(det: Detector, images: np.ndarray | Sequence[np.ndarray]) -> np.ndarray:
    arr = np.asarray(images, dtype=det.dtype)
    if arr.ndim == 3:
        arr = arr[None]
    expected = (det.config.in_channels, *det.config.input_size)
    if arr.ndim != 4 or arr.shape[1:] != expected:
        raise T.ShapeError(f"image shape {arr.shape[1:]} does not match detector input {expected}")
    return arr


def forward_detect(det: Detector, image: np.ndarray) -> np.ndarray:
    """Grid prediction (5, Gh, Gw) for one (C,H,W) image."""
    head, _ = det.forward(Node(_batch(det, image)))
    return head.value[0]


# -- box coding --------------------------------------------------------------------


def encode_box(box: BoundingBox, stride: int, grid: tuple[int, int]) -> tuple[int, int, np.ndarray]:
    """(row, col, [tx, ty, tw, th]) for the cell holding the box centre."""
    cx, cy = box.center
    col = min(int(cx // stride), grid[1] - 1)
    row = min(int(cy // stride), grid[0] - 1)
    target = np.array([cx / stride - col, cy / stride - row, math.log(box.width / stride), math.log(box.height / stride)])
    return row, col, target


def decode(
    pred: np.ndarray,
    conf_threshold: float = DEFAULT_CONF_THRESHOLD,
    image_size: tuple[int, int] | None = None,
    stride: int | None = None,
) -> list[Detection]:
    """Cells whose objectness probability exceeds the threshold, in row-major order.

    ``image_size`` is (W, H); boxes are clipped to it.
    """
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValueError("conf_threshold must be in [0, 1]")
    _, gh, gw = pred.shape
    if image_size is None:
        if stride is None:
            raise ValueError("need image_size or stride")
        image_size = (gw * stride, gh * stride)
    width, height = image_size
    sx, sy = width / gw, height / gh
    scores = T._sigmoid(np.asarray(pred[0], dtype=np.float64))
    dets = []
    for row, col in zip(*np.nonzero(scores > conf_threshold)):
        tx, ty, tw, th = (float(v) for v in pred[1:, row, col])
        cx, cy = (col + tx) * sx, (row + ty) * sy
        # clamp keeps exp finite for untrained weights
        w, h = math.exp(min(tw, 20.0)) * sx, math.exp(min(th, 20.0)) * sy
        x0, y0 = max(cx - w / 2, 0.0), max(cy - h / 2, 0.0)
        x1, y1 = min(cx + w / 2, float(width)), min(cy + h / 2, float(height))
        if x1 <= x0 or y1 <= y0:
            continue
        dets.append(Detection(BoundingBox(x0, y0, x1, y1), float(scores[row, col])))
    return dets


def nms(dets: Sequence[Detection], iou_threshold: float = DEFAULT_NMS_THRESHOLD) -> list[Detection]:
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("iou_threshold must be in (0, 1]")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: list[Detection] = []
    for i in order:
        if all(iou(dets[i].box, k.box) <= iou_threshold for k in kept):
            kept.append(dets[i])
    return kept


def predict(
    det: Detector,
    image: np.ndarray,
    conf_threshold: float = DEFAULT_CONF_THRESHOLD,
    nms_threshold: float = DEFAULT_NMS_THRESHOLD,
) -> list[Detection]:
    h, w = det.config.input_size
    return nms(decode(forward_detect(det, image), conf_threshold, (w, h)), nms_threshold)


# -- loss and training ----------------------------------------------------------------


def build_targets(truths: Sequence[Annotation], config: BackboneConfig) -> tuple[np.ndarray, np.ndarray]:
    """Objectness targets (N,1,Gh,Gw) and box targets (N,4,Gh,Gw).

    When two boxes share a cell the first one listed wins.
    """
    gh, gw = config.grid_size
    obj = np.zeros((len(truths), 1, gh, gw))
    box = np.zeros((len(truths), 4, gh, gw))
    for n, ann in enumerate(truths):
        for b in ann.boxes:
            row, col, t = encode_box(b, config.stride, (gh, gw))
            if obj[n, 0, row, col]:
                continue
            obj[n, 0, row, col] = 1.0
            box[n, :, row, col] = t
    return obj, box


def loss(
    pred: Node,
    truths: Sequence[Annotation],
    config: BackboneConfig,
    objectness_weight: float = 1.0,
    box_weight: float = 1.0,
) -> Node:
    """Balanced BCE on objectness plus L1 on box offsets at positive cells.

    The objectness term is the mean BCE over positive cells plus the mean BCE
    over negative cells; the box term is the summed L1 over the four offsets,
    averaged over positive cells.
    """
    obj_t, box_t = build_targets(truths, config)
    dtype = pred.value.dtype
    pos = obj_t
    n_pos, n_neg = pos.sum(), pos.size - pos.sum()
    cell_w = np.where(pos > 0, 1.0 / max(n_pos, 1.0), 1.0 / max(n_neg, 1.0)).astype(dtype)

    logits = T.slice_channels(pred, 0, 1)
    bce = T.sub(T.softplus(logits), T.mul(logits, T.constant(pos, dtype)))
    total = T.scalar_mul(T.weighted_sum(bce, cell_w), objectness_weight)
    if n_pos:
        offsets = T.slice_channels(pred, 1, 5)
        l1 = T.abs_(T.sub(offsets, T.constant(box_t, dtype)))
        box_w = (np.broadcast_to(pos, box_t.shape) / n_pos).astype(dtype)
        total = T.add(total, T.scalar_mul(T.weighted_sum(l1, box_w), box_weight))
    return total


@dataclass
class TrainingLog:
    epoch_losses: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        rows = ["epoch,mean_loss\n"] + [f"{i},{v!r}\n" for i, v in enumerate(self.epoch_losses, 1)]
        return "".join(rows)


def train(
    dataset: Sequence[tuple[np.ndarray, Annotation]],
    config: TrainConfig = TrainConfig(),
    backbone: BackboneConfig = BackboneConfig(),
    init: Detector | None = None,
) -> tuple[Detector, TrainingLog]:
    """Minibatch SGD with momentum; ``dataset`` holds (CHW float image, annotation) pairs."""
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    dtype = _np_dtype(config.dtype)
    init_seed, order_seed = child_seeds(config.seed, 2)
    det = init.astype(dtype) if init is not None else build_detector(backbone, init_seed, dtype)
    backbone = det.config
    images = np.stack([np.asarray(img, dtype=dtype) for img, _ in dataset])
    anns = [a for _, a in dataset]
    _batch(det, images[:1])

    opt = T.SGD(det.params.values(), config.learning_rate, config.momentum)
    rng = make_rng(order_seed)
    log = TrainingLog()
    n = len(dataset)
    # overflow shows up as a non-finite loss, reported below
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(config.epochs):
            order = rng.permutation(n)
            running = 0.0
            for start in range(0, n, config.batch_size):
                idx = order[start : start + config.batch_size]
                head, _ = det.forward(T.constant(images[idx], dtype))
                value = loss(head, [anns[i] for i in idx], backbone, config.objectness_loss_weight, config.box_loss_weight)
                if not np.isfinite(value.value):
                    raise TrainingDiverged(f"loss became {float(value.value)} in epoch {len(log.epoch_losses) + 1}")
                T.backward(value)
                opt.step()
                running += float(value.value) * len(idx)
            log.epoch_losses.append(running / n)
    return det, log


# -- activations ----------------------------------------------------------------------


def normalize_map(fmap: np.ndarray) -> np.ndarray:
    lo, hi = float(fmap.min()), float(fmap.max())
    if hi <= lo:
        return np.zeros(fmap.shape, dtype=np.uint8)
    return np.round((fmap - lo) / (hi - lo) * 255.0).astype(np.uint8)


def stage_features(det: Detector, image: np.ndarray, stage: int) -> np.ndarray:
    if not 0 <= stage < len(det.config.stages):
        raise ConfigError(f"invalid stage {stage}; backbone has {len(det.config.stages)} stages")
    _, feats = det.forward(Node(_batch(det, image)))
    return feats[stage].value[0]


def dump_activations(det: Detector, image: np.ndarray, stage: int) -> list[np.ndarray]:
    """One 8-bit min-max normalized map per channel of the (post-gate) stage output."""
    return [normalize_map(ch) for ch in stage_features(det, image, stage)]


# -- weights on disk ------------------------------------------------------------------


def save_weights(det: Detector, path: str | os.PathLike) -> tuple[Path, Path]:
    """Little-endian flat binary of all tensors in order, plus a JSON sidecar."""
    path = Path(path)
    sidecar = path.with_suffix(".json")
    dtype = np.dtype(det.dtype).newbyteorder("<")
    entries, chunks, offset = [], [], 0
    for name, p in det.params.items():
        arr = np.ascontiguousarray(p.value, dtype=dtype)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    path.write_bytes(b"".join(chunks))
    meta = {
        "format": WEIGHTS_FORMAT,
        "dtype": dtype.str,
        "backbone": det.config.to_dict(),
        "tensors": entries,
    }
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path, sidecar


def load_weights(path: str | os.PathLike) -> Detector:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    if meta.get("format") != WEIGHTS_FORMAT:
        raise ValueError(f"{path}: unknown weights format {meta.get('format')!r}")
    dtype = np.dtype(meta["dtype"])
    raw = path.read_bytes()
    params = {}
    for e in meta["tensors"]:
        arr = np.frombuffer(raw, dtype=dtype, count=e["count"], offset=e["offset"])
        params[e["name"]] = arr.reshape(e["shape"]).astype(dtype.newbyteorder("="))
    return Detector(BackboneConfig.from_dict(meta["backbone"]), params)
