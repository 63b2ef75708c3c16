"""Log attention gate and the conventional gating baselines.

The gate is parameter-free: ``y = x * log(relu(x) + 1)``. Its true derivative
is ``log(x+1) + x/(x+1)`` for x > 0 and 0 elsewhere. A second convention,
``log(x+1) + 1/(x+1)`` for x >= 0 and 1 elsewhere, is kept only so the two can
be compared; it is not the derivative of the forward pass and is never used
for training.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass

import numpy as np

from .tensor import Node, _sigmoid, finite_diff_grad

# natural log; set to 10.0 to A/B a base-10 gate
LOG_BASE = math.e


class AttentionKind(str, enum.Enum):
    LOG = "log"
    SIGMOID = "sigmoid"
    SOFTMAX = "softmax"
    IDENTITY = "none"


class GradientConvention(str, enum.Enum):
    ANALYTIC = "analytic"
    PAPER_EQ2 = "paper-eq2"


class NonFiniteInput(ValueError):
    pass


def _finite(f) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64) if not isinstance(f, np.ndarray) else f
    if not np.all(np.isfinite(f)):
        raise NonFiniteInput("attention input contains NaN or Inf")
    return f


def _log(x: np.ndarray, base: float) -> np.ndarray:
    out = np.log1p(x)
    return out if base == math.e else out / math.log(base)


def log_attention_forward(f, base: float = LOG_BASE) -> np.ndarray:
    f = _finite(f)
    return f * _log(np.maximum(f, 0.0), base)


def log_attention_backward(f, upstream, convention=GradientConvention.ANALYTIC, base: float = LOG_BASE) -> np.ndarray:
    f = _finite(f)
    upstream = np.asarray(upstream, dtype=f.dtype)
    if f.shape != upstream.shape:
        raise ValueError(f"shape mismatch {f.shape} vs {upstream.shape}")
    convention = GradientConvention(convention)
    scale = 1.0 if base == math.e else 1.0 / math.log(base)
    fp = np.maximum(f, 0.0)
    if convention is GradientConvention.ANALYTIC:
        local = np.where(f > 0, _log(fp, base) + scale * fp / (fp + 1.0), 0.0)
    else:
        # 1/(f+1) term and a constant-1 branch for negative f, taken verbatim
        local = np.where(f >= 0, _log(fp, base) + 1.0 / (fp + 1.0), 1.0)
    return upstream * local


def sigmoid_gate_forward(f) -> np.ndarray:
    f = _finite(f)
    return f * _sigmoid(f)


def _channel_axis(ndim: int) -> int:
    return -3 if ndim >= 3 else 0


def softmax_channels(f: np.ndarray) -> np.ndarray:
    axis = _channel_axis(f.ndim)
    z = np.exp(f - f.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softmax_gate_forward(f) -> np.ndarray:
    """f times the softmax of f across channels (axis -3 for CHW/NCHW)."""
    f = _finite(f)
    return f * softmax_channels(f)


# -- graph versions -----------------------------------------------------------


def log_attention(x: Node, base: float = LOG_BASE) -> Node:
    f = x.value
    out = log_attention_forward(f, base).astype(f.dtype, copy=False)
    return Node(out, (x,), lambda g: x._accumulate(log_attention_backward(f, g, GradientConvention.ANALYTIC, base)))


def sigmoid_gate(x: Node) -> Node:
    f = x.value
    s = _sigmoid(f)
    return Node(f * s, (x,), lambda g: x._accumulate(g * (s + f * s * (1.0 - s))))


def softmax_gate(x: Node) -> Node:
    f = x.value
    s = softmax_channels(f)
    axis = _channel_axis(f.ndim)

    def bw(g):
        u = g * f
        x._accumulate(g * s + s * (u - np.sum(s * u, axis=axis, keepdims=True)))

    return Node(f * s, (x,), bw)


def apply_gate(kind: AttentionKind | str, x: Node) -> Node:
    kind = AttentionKind(kind)
    if kind is AttentionKind.LOG:
        return log_attention(x)
    if kind is AttentionKind.SIGMOID:
        return sigmoid_gate(x)
    if kind is AttentionKind.SOFTMAX:
        return softmax_gate(x)
    return x


# -- diagnostic -----------------------------------------------------------------


@dataclass(frozen=True)
class DiscrepancyRow:
    f: float
    analytic: float
    paper_eq2: float
    abs_diff: float


def eq2_discrepancy_report(lo: float, hi: float, samples: int) -> list[DiscrepancyRow]:
    """Analytic derivative vs. the alternative convention on an even grid over [lo, hi]."""
    if not lo < hi:
        raise ValueError("need lo < hi")
    if samples < 2:
        raise ValueError("need at least two samples")
    # rounding keeps grid points such as 1.0 exact
    grid = np.round(np.linspace(lo, hi, samples), 12)
    ones = np.ones_like(grid)
    analytic = log_attention_backward(grid, ones, GradientConvention.ANALYTIC)
    paper = log_attention_backward(grid, ones, GradientConvention.PAPER_EQ2)
    return [
        DiscrepancyRow(float(f), float(a), float(p), float(abs(a - p)))
        for f, a, p in zip(grid, analytic, paper)
    ]


def discrepancy_csv(rows: list[DiscrepancyRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["f", "analytic", "paper_eq2", "abs_diff"])
    for r in rows:
        writer.writerow([repr(r.f), repr(r.analytic), repr(r.paper_eq2), repr(r.abs_diff)])
    return buf.getvalue()


@dataclass(frozen=True)
class GradCheckRow:
    f: float
    analytic: float
    numeric: float
    rel_err: float


def relative_error(a: float, b: float, floor: float = 1e-12) -> float:
    scale = max(abs(a), abs(b))
    return 0.0 if scale < floor else abs(a - b) / scale


def gradient_check(points, eps: float = 1e-6, kink_margin: float = 1e-4) -> list[GradCheckRow]:
    """Analytic gradient vs. central differences of the forward at each point.

    Points within ``kink_margin`` of 0 are skipped.
    """
    pts = np.asarray(points, dtype=np.float64).ravel()
    pts = pts[np.abs(pts) >= kink_margin]
    analytic = log_attention_backward(pts, np.ones_like(pts))
    rows = []
    for x, a in zip(pts, analytic):
        n = float(finite_diff_grad(lambda v: float(log_attention_forward(v)[0]), np.array([x]), eps)[0])
        rows.append(GradCheckRow(float(x), float(a), n, relative_error(float(a), n)))
    return rows
