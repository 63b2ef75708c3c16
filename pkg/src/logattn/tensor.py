"""Small reverse-mode autodiff engine over numpy arrays.

Values are plain ``numpy.ndarray`` objects. A :class:`Node` pairs a value with
its gradient and the closure that pushes gradient to its parents. Only the
operations the toy detector needs are provided: elementwise arithmetic,
ReLU/log1p/sigmoid/softplus/abs, reductions, ``conv2d`` and ``maxpool2d``.
Layout is NCHW (a 3-D CHW input is accepted and treated as a batch of one).
There is no broadcasting between nodes.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Node:
    """A value in the computation graph."""

    __slots__ = ("value", "grad", "parents", "_backward", "name", "requires_grad")

    def __init__(self, value, parents: Sequence["Node"] = (), backward=None, name: str = "", requires_grad: bool = True):
        arr = np.asarray(value)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.value: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self._backward: Callable[[np.ndarray], None] | None = backward
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other) if isinstance(other, Node) else scalar_add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Node) else scalar_add(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Node) else scalar_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.shape}, dtype={self.value.dtype})"


def constant(value, dtype=None) -> Node:
    """A leaf that never receives gradient."""
    arr = np.asarray(value, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
    return Node(arr, requires_grad=False)


def _check_same_shape(a: Node, b: Node, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ------------------------------------------------------------


def add(a: Node, b: Node) -> Node:
    _check_same_shape(a, b, "add")

    def bw(g):
        a._accumulate(g)
        b._accumulate(g)

    return Node(a.value + b.value, (a, b), bw)


def sub(a: Node, b: Node) -> Node:
    _check_same_shape(a, b, "sub")

    def bw(g):
        a._accumulate(g)
        b._accumulate(-g)

    return Node(a.value - b.value, (a, b), bw)


def mul(a: Node, b: Node) -> Node:
    _check_same_shape(a, b, "mul")

    def bw(g):
        a._accumulate(g * b.value)
        b._accumulate(g * a.value)

    return Node(a.value * b.value, (a, b), bw)


def scalar_mul(a: Node, c: float) -> Node:
    return Node(a.value * c, (a,), lambda g: a._accumulate(g * c))


def scalar_add(a: Node, c: float) -> Node:
    return Node(a.value + c, (a,), lambda g: a._accumulate(g))


def relu(a: Node) -> Node:
    # subgradient at exactly 0 is 0
    mask = a.value > 0
    return Node(np.where(mask, a.value, 0.0).astype(a.value.dtype), (a,), lambda g: a._accumulate(g * mask))


def log1p(a: Node) -> Node:
    if np.any(a.value <= -1.0):
        raise DomainError("log1p: input must be > -1")
    return Node(np.log1p(a.value), (a,), lambda g: a._accumulate(g / (1.0 + a.value)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Node) -> Node:
    s = _sigmoid(a.value)
    return Node(s, (a,), lambda g: a._accumulate(g * s * (1.0 - s)))


def softplus(a: Node) -> Node:
    """log(1 + exp(x)), computed without overflow."""
    x = a.value
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return Node(out, (a,), lambda g: a._accumulate(g * _sigmoid(x)))


def abs_(a: Node) -> Node:
    return Node(np.abs(a.value), (a,), lambda g: a._accumulate(g * np.sign(a.value)))


ELEMENTWISE_KINDS = ("add", "sub", "mul", "relu", "log1p", "sigmoid", "scalar-mul", "scalar-add")


def elementwise(kind: str, a: Node, b: Node | float | None = None) -> Node:
    """Dispatch by name; ``b`` is a node for binary kinds and a float for scalar kinds."""
    binary = {"add": add, "sub": sub, "mul": mul}
    unary = {"relu": relu, "log1p": log1p, "sigmoid": sigmoid}
    scalar = {"scalar-mul": scalar_mul, "scalar-add": scalar_add}
    if kind in binary:
        if not isinstance(b, Node):
            raise TypeError(f"{kind} needs a second node")
        return binary[kind](a, b)
    if kind in unary:
        return unary[kind](a)
    if kind in scalar:
        return scalar[kind](a, float(b))
    raise ValueError(f"unknown elementwise op {kind!r}; expected one of {ELEMENTWISE_KINDS}")


# -- reductions and reshaping ------------------------------------------------


def sum_(a: Node) -> Node:
    return Node(np.sum(a.value), (a,), lambda g: a._accumulate(np.broadcast_to(g, a.shape)))


def mean(a: Node) -> Node:
    n = a.value.size

    def bw(g):
        a._accumulate(np.broadcast_to(g / n, a.shape))

    return Node(np.mean(a.value), (a,), bw)


def weighted_sum(a: Node, weights: np.ndarray) -> Node:
    """sum(a * weights) with ``weights`` a constant array of a's shape."""
    if weights.shape != a.shape:
        raise ShapeError(f"weighted_sum: shape mismatch {a.shape} vs {weights.shape}")
    return Node(np.sum(a.value * weights), (a,), lambda g: a._accumulate(g * weights))


def slice_channels(a: Node, start: int, stop: int) -> Node:
    """a[:, start:stop] for a 4-D node."""

    def bw(g):
        full = np.zeros_like(a.value)
        full[:, start:stop] = g
        a._accumulate(full)

    return Node(a.value[:, start:stop], (a,), bw)


def add_bias(a: Node, bias: Node) -> Node:
    """Adds a per-channel bias of shape (C,) to an NCHW node."""
    if a.value.ndim != 4 or bias.shape != (a.shape[1],):
        raise ShapeError(f"add_bias: bias {bias.shape} does not match channels of {a.shape}")

    def bw(g):
        a._accumulate(g)
        bias._accumulate(g.sum(axis=(0, 2, 3)))

    return Node(a.value + bias.value[None, :, None, None], (a, bias), bw)


# -- convolution and pooling -------------------------------------------------


def _as_batch(x: Node) -> tuple[Node, bool]:
    if x.value.ndim == 3:
        v = x.value[None]
        return Node(v, (x,), lambda g: x._accumulate(g[0]), requires_grad=x.requires_grad), True
    if x.value.ndim != 4:
        raise ShapeError(f"expected CHW or NCHW input, got shape {x.shape}")
    return x, False


def _unbatch(out: Node) -> Node:
    return Node(out.value[0], (out,), lambda g: out._accumulate(g[None]))


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Node, w: Node, stride: int = 1, pad: int = 0, bias: Node | None = None) -> Node:
    """2-D cross-correlation with zero padding.

    x is (C,H,W) or (N,C,H,W), w is (K,C,kh,kw). Output is (K,H',W') or
    (N,K,H',W') with H' = floor((H + 2*pad - kh) / stride) + 1.
    """
    if stride < 1 or pad < 0:
        raise ShapeError("conv2d: stride must be >= 1 and pad >= 0")
    xb, squeezed = _as_batch(x)
    n, c, h, wd = xb.shape
    if w.value.ndim != 4 or w.shape[1] != c:
        raise ShapeError(f"conv2d: kernel {w.shape} incompatible with input channels {c}")
    k, _, kh, kw = w.shape
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)

    xp = np.pad(xb.value, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xb.value
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # im2col: rows are output pixels, columns are (kh, kw, C) taps
    cols = win.transpose(0, 2, 3, 4, 5, 1).reshape(n * ho * wo, kh * kw * c)
    wmat = w.value.transpose(0, 2, 3, 1).reshape(k, kh * kw * c)
    out = np.ascontiguousarray((cols @ wmat.T).reshape(n, ho, wo, k).transpose(0, 3, 1, 2))

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, k)
        w._accumulate((g2.T @ cols).reshape(k, kh, kw, c).transpose(0, 3, 1, 2))
        if not xb.requires_grad:
            return
        dcols = (g2 @ wmat).reshape(n, ho, wo, kh, kw, c)
        dxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c), dtype=xp.dtype)  # NHWC
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, :, i, j]
        dx = dxp[:, pad : pad + h, pad : pad + wd] if pad else dxp
        xb._accumulate(dx.transpose(0, 3, 1, 2))

    result = Node(out, (xb, w), bw)
    if bias is not None:
        result = add_bias(result, bias)
    return _unbatch(result) if squeezed else result


def maxpool2d(x: Node, window: int, stride: int) -> Node:
    """Per-window maximum; gradient goes to the first maximal element in row-major order."""
    if window < 1 or stride < 1:
        raise ShapeError("maxpool2d: window and stride must be >= 1")
    xb, squeezed = _as_batch(x)
    n, c, h, wd = xb.shape
    if window > h or window > wd:
        raise ShapeError(f"maxpool2d: window {window} larger than input {h}x{wd}")
    ho = (h - window) // stride + 1
    wo = (wd - window) // stride + 1
    win = sliding_window_view(xb.value, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = np.argmax(flat, axis=-1)  # numpy returns the first index on ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        rows = np.arange(ho)[:, None] * stride + arg // window
        cols = np.arange(wo)[None, :] * stride + arg % window
        nn, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
        dx = np.zeros_like(xb.value)
        np.add.at(dx, (nn[..., None, None], cc[..., None, None], rows, cols), g)
        xb._accumulate(dx)

    result = Node(np.ascontiguousarray(out), (xb,), bw)
    return _unbatch(result) if squeezed else result


# -- graph traversal ---------------------------------------------------------


def topological_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Populate ``.grad`` on every node reachable from a scalar ``loss``.

    Leaf gradients accumulate across calls until cleared (see :class:`SGD`);
    intermediate gradients are recomputed from scratch.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topological_order(loss)
    for node in order:
        if not node.is_leaf:
            node.grad = None
    loss._accumulate(np.ones_like(loss.value))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# -- numerical oracle ---------------------------------------------------------


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        orig = x.flat[i]
        x.flat[i] = orig + eps
        hi = float(f(x))
        x.flat[i] = orig - eps
        lo = float(f(x))
        x.flat[i] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise DomainError(f"f is not finite near coordinate {i}")
        grad.flat[i] = (hi - lo) / (2.0 * eps)
    return grad


# -- optimisation -------------------------------------------------------------


class SGD:
    """Plain SGD with heavy-ball momentum: v <- m*v + g; p <- p - lr*v."""

    def __init__(self, params: Iterable[Node], lr: float, momentum: float = 0.0):
        if lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        missing = [p.name or repr(p) for p in self.params if p.grad is None]
        if missing:
            raise RuntimeError(f"missing gradients for {', '.join(missing)}")
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad
            p.value -= self.lr * v
        self.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(params: Sequence[Node], lr: float, momentum: float = 0.0, state: SGD | None = None) -> SGD:
    """One optimizer step; pass the returned optimizer back in to keep momentum."""
    opt = state if state is not None else SGD(params, lr, momentum)
    opt.step()
    return opt
